//! Run configuration and the operations behind each CLI command.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{self, Dataset, DatasetManifest, Split, SplitRatios, SynthSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{self, CheckOutcome};
use crate::metrics::Metrics;
use crate::model::{forward_all, prepare_all, ModelConfig, ModelParams, PreparedTrial};
use crate::train::{self, probabilities, EpochStats, NoObserver, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Default,
    AlignmentSensitive,
}

/// Source of the attention queries. Only per-epoch node SPD matrices exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySource {
    NodeSpd,
}

/// Every setting a command can read, with defaults for all of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,

    pub trials: usize,
    pub channels: usize,
    pub trial_epochs: usize,
    pub samples: usize,
    pub sample_rate: f64,
    pub classes: usize,
    pub variant: Variant,
    /// Overrides the variant's noise level.
    pub noise: Option<f64>,
    pub split: SplitRatios,

    pub spatial_filters: usize,
    pub temporal_kernel: usize,
    pub feature_dim: usize,
    pub bimap_dim: usize,
    pub gru_hidden: usize,
    pub proj_dim: usize,
    pub stft_window: usize,
    pub stft_hop: usize,
    pub tau_top: usize,
    pub eps: f64,
    pub reeig_threshold: f64,
    pub temperature: f64,
    pub beta: f64,
    pub kappa: f64,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub meta_optimizer: bool,
    pub query_source: QuerySource,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::for_data(8, 6, 64, 2);
        let train = TrainConfig::default();
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("run"),
            trials: 400,
            channels: 8,
            trial_epochs: 6,
            samples: 64,
            sample_rate: 128.0,
            classes: 2,
            variant: Variant::Default,
            noise: None,
            split: SplitRatios::default(),
            spatial_filters: model.spatial_filters,
            temporal_kernel: model.temporal_kernel,
            feature_dim: model.feature_dim,
            bimap_dim: model.bimap_dim,
            gru_hidden: model.gru_hidden,
            proj_dim: model.proj_dim,
            stft_window: model.stft_window,
            stft_hop: model.stft_hop,
            tau_top: model.tau_top,
            eps: model.eps,
            reeig_threshold: model.reeig_threshold,
            temperature: model.temperature,
            beta: model.beta,
            kappa: model.kappa,
            lr: train.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            seed: train.seed,
            meta_optimizer: train.meta_optimizer,
            query_source: QuerySource::NodeSpd,
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) | Error::Config(m) => Error::Config(m),
        other => other,
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Range-checks every field.
    pub fn validate(&self) -> Result<()> {
        let check = || -> Result<()> {
            self.manifest().validate()?;
            self.split.validate()?;
            self.model_config(&self.manifest()).validate()?;
            self.train_config().validate()?;
            if let Some(n) = self.noise {
                if !(n.is_finite() && n >= 0.0) {
                    return Err(Error::Config(format!("noise must be nonnegative, got {n}")));
                }
            }
            Ok(())
        };
        check().map_err(config_err)
    }

    /// Manifest for `gen-data`.
    pub fn manifest(&self) -> DatasetManifest {
        let mut m = DatasetManifest::new(self.trials, self.channels, self.trial_epochs, self.samples, self.classes, self.seed);
        m.sample_rate = self.sample_rate;
        m.splits = self.split;
        m
    }

    pub fn synth_spec(&self, manifest: &DatasetManifest) -> SynthSpec {
        let mut spec = match self.variant {
            Variant::Default => SynthSpec::default_for(manifest),
            Variant::AlignmentSensitive => SynthSpec::alignment_sensitive(manifest),
        };
        if let Some(n) = self.noise {
            spec.noise = n;
        }
        spec
    }

    /// Model architecture for data shaped like `manifest`.
    pub fn model_config(&self, manifest: &DatasetManifest) -> ModelConfig {
        ModelConfig {
            channels: manifest.channels,
            epochs: manifest.epochs,
            samples: manifest.samples_per_epoch,
            num_classes: manifest.num_classes,
            spatial_filters: self.spatial_filters,
            temporal_kernel: self.temporal_kernel,
            feature_dim: self.feature_dim,
            bimap_dim: self.bimap_dim,
            gru_hidden: self.gru_hidden,
            proj_dim: self.proj_dim,
            stft_window: self.stft_window,
            stft_hop: self.stft_hop,
            tau_top: self.tau_top,
            eps: self.eps,
            reeig_threshold: self.reeig_threshold,
            temperature: self.temperature,
            beta: self.beta,
            kappa: self.kappa,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            meta_optimizer: self.meta_optimizer,
        }
    }
}

pub fn cmd_gen_data(config: &RunConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let manifest = config.manifest();
    data::generate(&config.synth_spec(&manifest), &manifest, &config.dataset)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            "all" => Ok(SplitName::All),
            _ => Err(Error::Config(format!("unknown split {s}; expected train, val, test or all"))),
        }
    }
}

fn split_indices(split: &Split, name: SplitName, total: usize) -> Vec<usize> {
    match name {
        SplitName::Train => split.train.clone(),
        SplitName::Val => split.val.clone(),
        SplitName::Test => split.test.clone(),
        SplitName::All => (0..total).collect(),
    }
}

/// Trials of one split, prepared for `model`.
struct SplitData {
    indices: Vec<usize>,
    trials: Vec<PreparedTrial>,
    labels: Vec<usize>,
}

fn check_dataset(model: &ModelConfig, dataset: &Dataset) -> Result<()> {
    let m = &dataset.manifest;
    if (m.channels, m.epochs, m.samples_per_epoch, m.num_classes)
        != (model.channels, model.epochs, model.samples, model.num_classes)
    {
        return Err(Error::CorruptData(format!(
            "dataset is {} channels x {} epochs x {} samples with {} classes; model expects {} x {} x {} with {}",
            m.channels,
            m.epochs,
            m.samples_per_epoch,
            m.num_classes,
            model.channels,
            model.epochs,
            model.samples,
            model.num_classes
        )));
    }
    Ok(())
}

fn split_data(model: &ModelConfig, dataset: &Dataset, indices: Vec<usize>) -> Result<SplitData> {
    let trials = prepare_all(model, indices.iter().map(|&i| dataset.trials[i].clone()).collect())?;
    let labels = indices.iter().map(|&i| dataset.labels[i]).collect();
    Ok(SplitData {
        indices,
        trials,
        labels,
    })
}

fn evaluate_split(params: &ModelParams, model: &ModelConfig, data: &SplitData) -> Result<Option<Metrics>> {
    if data.trials.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&PreparedTrial> = data.trials.iter().collect();
    train::evaluate(params, model, &refs, &data.labels).map(Some)
}

/// Contents of `metrics.json` after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
    pub train: Option<Metrics>,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
}

fn write_loss_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,loss,ce,geotop\n");
    for s in history {
        writeln!(out, "{},{},{},{}", s.epoch, s.loss, s.ce, s.geotop).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Trains on the train split of `config.dataset` and writes the checkpoint,
/// per-epoch loss CSV, metrics and effective config to `config.output`. If
/// training fails part way, the last good parameters are still saved.
pub fn cmd_train(config: &RunConfig) -> Result<TrainReport> {
    config.validate()?;
    let dataset = data::load(&config.dataset)?;
    let model = config.model_config(&dataset.manifest);
    model.validate().map_err(config_err)?;
    let train_cfg = config.train_config();
    let split = data::stratified_split(&dataset.labels, &dataset.manifest.splits, config.seed)?;
    let train_data = split_data(&model, &dataset, split.train.clone())?;
    let val_data = split_data(&model, &dataset, split.val.clone())?;
    let test_data = split_data(&model, &dataset, split.test.clone())?;
    if train_data.trials.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }

    fs::create_dir_all(&config.output)?;
    fs::write(config.output.join(CONFIG_FILE), config.to_json() + "\n")?;
    let mut params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let outcome = train::train(
        &mut params,
        &model,
        &train_cfg,
        &train_data.trials,
        &train_data.labels,
        &mut NoObserver,
    );
    let checkpoint = Checkpoint {
        model: model.clone(),
        train: train_cfg,
        params,
    };
    checkpoint.save(&config.output.join(CHECKPOINT_FILE))?;
    let history = outcome?;
    write_loss_csv(&config.output.join(LOSS_FILE), &history)?;
    let params = &checkpoint.params;
    let report = TrainReport {
        epochs_run: history.len(),
        final_loss: history.last().map(|s| s.loss),
        train: evaluate_split(params, &model, &train_data)?,
        val: evaluate_split(params, &model, &val_data)?,
        test: evaluate_split(params, &model, &test_data)?,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(config.output.join(METRICS_FILE), json + "\n")?;
    Ok(report)
}

fn load_for_eval(checkpoint: &Path, dataset: &Path, split: SplitName) -> Result<(Checkpoint, SplitData)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = data::load(dataset)?;
    check_dataset(&ckpt.model, &data)?;
    let ratios = data.manifest.splits;
    let parts = data::stratified_split(&data.labels, &ratios, ckpt.train.seed)?;
    let indices = split_indices(&parts, split, data.labels.len());
    let prepared = split_data(&ckpt.model, &data, indices)?;
    Ok((ckpt, prepared))
}

/// Metrics of a checkpoint on one split, using the same partition as training.
pub fn cmd_eval(checkpoint: &Path, dataset: &Path, split: SplitName) -> Result<Metrics> {
    let (ckpt, data) = load_for_eval(checkpoint, dataset, split)?;
    evaluate_split(&ckpt.params, &ckpt.model, &data)?.ok_or_else(|| Error::Config("selected split is empty".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportKind {
    Attention,
    Tangent,
    Adjacency,
    Scores,
}

impl ExportKind {
    fn file_name(self) -> &'static str {
        match self {
            ExportKind::Attention => "attention.csv",
            ExportKind::Tangent => "tangent.csv",
            ExportKind::Adjacency => "adjacency_epoch{t}.csv",
            ExportKind::Scores => "scores.csv",
        }
    }
}

impl std::str::FromStr for ExportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(ExportKind::Attention),
            "tangent" => Ok(ExportKind::Tangent),
            "adjacency" => Ok(ExportKind::Adjacency),
            "scores" => Ok(ExportKind::Scores),
            _ => Err(Error::Config(format!(
                "unknown export {s}; expected attention, tangent, adjacency or scores"
            ))),
        }
    }
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes CSV files into `out_dir` and returns their paths.
///
/// * attention: `trial,label,epoch,w_0..w_{T-1}`, one row per attention row
/// * tangent: `trial,label` then the `T·l(l+1)/2` tangent coordinates
/// * adjacency: one file per epoch, `trial,label,node,a_0..a_{N-1}`
/// * scores: `trial,label` then one class probability per class
pub fn cmd_export(
    checkpoint: &Path,
    dataset: &Path,
    kind: ExportKind,
    split: SplitName,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (ckpt, data) = load_for_eval(checkpoint, dataset, split)?;
    let model = &ckpt.model;
    let refs: Vec<&PreparedTrial> = data.trials.iter().collect();
    let mut out = String::new();
    match kind {
        ExportKind::Attention => {
            let outputs = forward_all(&ckpt.params, model, &refs)?;
            let cols: Vec<String> = (0..model.epochs).map(|j| format!("w_{j}")).collect();
            writeln!(out, "trial,label,epoch,{}", cols.join(",")).expect("string write");
            for ((idx, y), o) in data.indices.iter().zip(&data.labels).zip(&outputs) {
                for (t, row) in o.attention.weights.row_iter().enumerate() {
                    writeln!(out, "{idx},{y},{t},{}", join(row.iter().copied())).expect("string write");
                }
            }
        }
        ExportKind::Tangent => {
            let outputs = forward_all(&ckpt.params, model, &refs)?;
            let p = model.tangent_dim();
            let cols: Vec<String> = (0..model.epochs)
                .flat_map(|t| (0..p).map(move |k| format!("m_{t}_{k}")))
                .collect();
            writeln!(out, "trial,label,{}", cols.join(",")).expect("string write");
            for ((idx, y), o) in data.indices.iter().zip(&data.labels).zip(&outputs) {
                let flat = o.tangent.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>());
                writeln!(out, "{idx},{y},{}", join(flat)).expect("string write");
            }
        }
        ExportKind::Adjacency => {
            let cols: Vec<String> = (0..model.channels).map(|j| format!("a_{j}")).collect();
            let mut files = Vec::with_capacity(model.epochs);
            for t in 0..model.epochs {
                let mut out = format!("trial,label,node,{}\n", cols.join(","));
                for ((idx, y), trial) in data.indices.iter().zip(&data.labels).zip(&data.trials) {
                    for (i, row) in trial.structure.adjacency[t].row_iter().enumerate() {
                        writeln!(out, "{idx},{y},{i},{}", join(row.iter().copied())).expect("string write");
                    }
                }
                files.push((format!("adjacency_epoch{t}.csv"), out));
            }
            return write_all(out_dir, files);
        }
        ExportKind::Scores => {
            let outputs = forward_all(&ckpt.params, model, &refs)?;
            let probs = probabilities(&outputs, model.num_classes);
            let cols: Vec<String> = (0..model.num_classes).map(|c| format!("p_{c}")).collect();
            writeln!(out, "trial,label,{}", cols.join(",")).expect("string write");
            for (r, (idx, y)) in data.indices.iter().zip(&data.labels).enumerate() {
                writeln!(out, "{idx},{y},{}", join(probs.row(r).iter().copied())).expect("string write");
            }
        }
    }
    write_all(out_dir, vec![(kind.file_name().to_string(), out)])
}

fn write_all(out_dir: &Path, files: Vec<(String, String)>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    files
        .into_iter()
        .map(|(name, text)| {
            let path = out_dir.join(name);
            fs::write(&path, text)?;
            Ok(path)
        })
        .collect()
}

/// Runs the gradient checks for `module` (all when `None`).
pub fn cmd_check_grad(module: Option<&str>, seeds: u64, tolerance: f64) -> Result<Vec<CheckOutcome>> {
    if seeds == 0 {
        return Err(Error::Config("seeds must be positive".into()));
    }
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tolerance}")));
    }
    let checks = gradcheck::select(module).map_err(config_err)?;
    checks.into_iter().map(|c| c.run(seeds, tolerance)).collect()
}

pub const THREADS_ENV: &str = "GEO_SPD_THREADS";

/// Sizes the global worker pool from a `GEO_SPD_THREADS` value. Results do
/// not depend on the pool size.
pub fn init_thread_pool(threads: Option<&str>) -> Result<()> {
    let Some(raw) = threads else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Process exit code for an error: 2 configuration, 3 data, 4 numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Io(_) | Error::CorruptData(_) | Error::IncompatibleFormat(_) => 3,
        Error::NumericalFailure(_) | Error::NotPositiveDefinite { .. } => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        RunConfig {
            dataset: dir.join("data"),
            output: dir.join("run"),
            trials: 20,
            channels: 4,
            trial_epochs: 2,
            samples: 32,
            spatial_filters: 4,
            temporal_kernel: 5,
            feature_dim: 6,
            bimap_dim: 3,
            gru_hidden: 4,
            proj_dim: 4,
            stft_window: 8,
            stft_hop: 4,
            tau_top: 2,
            epochs: 2,
            batch_size: 8,
            lr: 1e-2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(matches!(RunConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        let partial = RunConfig::from_json(r#"{"beta": 0.0, "variant": "alignment-sensitive"}"#).unwrap();
        assert_eq!(partial.beta, 0.0);
        assert_eq!(partial.variant, Variant::AlignmentSensitive);
        assert!(c.validate().is_ok());
        for bad in [
            RunConfig { beta: 1.5, ..c.clone() },
            RunConfig { lr: -1.0, ..c.clone() },
            RunConfig { bimap_dim: 30, ..c.clone() },
            RunConfig { tau_top: 8, ..c.clone() },
            RunConfig { trials: 0, ..c.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn train_eval_export_cycle() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let manifest = cmd_gen_data(&cfg).unwrap();
        assert_eq!(manifest.num_trials, 20);
        let report = cmd_train(&cfg).unwrap();
        assert_eq!(report.epochs_run, 2);
        let ckpt = cfg.output.join(CHECKPOINT_FILE);
        let metrics = cmd_eval(&ckpt, &cfg.dataset, SplitName::Test).unwrap();
        assert_eq!(Some(metrics), report.test);
        for kind in [ExportKind::Attention, ExportKind::Tangent, ExportKind::Adjacency, ExportKind::Scores] {
            let paths = cmd_export(&ckpt, &cfg.dataset, kind, SplitName::Test, &dir.path().join("exp")).unwrap();
            assert_eq!(paths.len(), if kind == ExportKind::Adjacency { 2 } else { 1 });
            for path in paths {
                assert!(fs::read_to_string(path).unwrap().lines().count() > 1);
            }
        }
        let loss = fs::read_to_string(cfg.output.join(LOSS_FILE)).unwrap();
        assert_eq!(loss.lines().count(), 3);
    }

    #[test]
    fn zero_epochs_saves_initial_params() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { epochs: 0, ..small(dir.path()) };
        cmd_gen_data(&cfg).unwrap();
        let report = cmd_train(&cfg).unwrap();
        assert_eq!(report.epochs_run, 0);
        assert_eq!(report.final_loss, None);
        let ckpt = Checkpoint::load(&cfg.output.join(CHECKPOINT_FILE)).unwrap();
        let model = cfg.model_config(&cfg.manifest());
        let init = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(ckpt.params, init);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::CorruptData("x".into())), 3);
        assert_eq!(exit_code(&Error::IncompatibleFormat("x".into())), 3);
        assert_eq!(exit_code(&Error::NumericalFailure("x".into())), 4);
    }
}
