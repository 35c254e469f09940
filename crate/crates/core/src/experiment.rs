//! Declarative experiments: dataset, training, evaluation, sweeps and run
//! manifests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Precision;
use crate::config::content_hash;
use crate::data::{
    generate_split, read_trajectory, write_trajectory, DatasetConfig, DatasetSplit, Trajectory,
};
use crate::error::{Error, Result};
use crate::model::{parameter_count, relative_gap, Model, ModelConfig, Normalizer};
use crate::nn::PeMode;
use crate::rollout::{contexts, evaluate_with, latent_distance_probe, EvalReport, ModelSurrogate};
use crate::temporal::CorrectorFrequency;
use crate::train::{Checkpoint, StepLog, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rollout length in steps; the full trajectory when absent.
    pub horizon: Option<usize>,
    /// Record the final-layer latent distance every this many updates.
    pub probe_every: Option<u64>,
    /// Test trajectories used by the latent-distance probe.
    pub probe_trajectories: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            probe_every: None,
            probe_trajectories: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub mnp_centers: Vec<usize>,
    /// Depths of the fixed-budget width-vs-depth sweep.
    pub depths: Vec<usize>,
    /// Weight given to an auxiliary loss when it is switched on.
    pub aux_weight: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            mnp_centers: vec![0, 64, 256],
            depths: vec![2, 4, 8],
            aux_weight: 0.1,
        }
    }
}

/// Complete description of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Updates of a noise-free run whose one-step error standard deviation
    /// replaces `train.noise_std`.
    pub noise_calibration_steps: Option<u64>,
    /// Checkpoint period in updates; only the final checkpoint when absent.
    pub checkpoint_every: Option<u64>,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
            noise_calibration_steps: None,
            checkpoint_every: None,
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// SHA-256 of the canonical TOML with `out_dir` blanked, so the hash
    /// names what is computed rather than where it is written.
    pub fn hash(&self) -> String {
        let placed = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        content_hash(placed.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.dataset.train_trajectories == 0 {
            return Err(Error::Config(
                "at least one training trajectory is required".into(),
            ));
        }
        Ok(())
    }

    /// Model configuration of one seed.
    pub fn model_for(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            seed,
            ..self.model.clone()
        }
    }
}

/// Reproduction record written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub precision: String,
    pub version: String,
    /// `(relative path, sha256)` of every output file, sorted by path.
    pub outputs: Vec<(String, String)>,
}

/// Writes `config.toml` and `manifest.json` into `dir`, hashing the listed
/// outputs (paths relative to `dir`).
pub fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    outputs: &[String],
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let mut files = Vec::with_capacity(outputs.len());
    for rel in outputs {
        let path = dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        files.push((rel.clone(), content_hash(&bytes)));
    }
    files.sort();
    let manifest = Manifest {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        precision: match Precision::process_default() {
            Precision::F32 => "f32".into(),
            Precision::F64 => "f64".into(),
        },
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: files,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn data_file(dir: &Path, split: &str, k: usize) -> PathBuf {
    dir.join(format!("{split}_{k:03}.traj"))
}

fn dataset_stamp(cfg: &DatasetConfig) -> String {
    toml::to_string(cfg).expect("dataset config serializes")
}

/// Writes every trajectory of the split under `dir`, plus `dataset.toml`
/// recording the generating configuration; returns the written paths.
pub fn write_dataset(
    dir: &Path,
    cfg: &DatasetConfig,
    split: &DatasetSplit,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stamp = dir.join("dataset.toml");
    write_text(&stamp, &dataset_stamp(cfg))?;
    let mut paths = vec![stamp];
    for (name, trajs) in [("train", &split.train), ("test", &split.test)] {
        for (k, traj) in trajs.iter().enumerate() {
            let path = data_file(dir, name, k);
            write_trajectory(&path, traj)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Reads a dataset written by [`write_dataset`] from the same
/// configuration when `dir` holds one, and generates it otherwise.
pub fn load_or_generate(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetSplit> {
    let same =
        std::fs::read_to_string(dir.join("dataset.toml")).is_ok_and(|s| s == dataset_stamp(cfg));
    let complete = same
        && (0..cfg.train_trajectories).all(|k| data_file(dir, "train", k).exists())
        && (0..cfg.test_trajectories).all(|k| data_file(dir, "test", k).exists());
    if !complete {
        return generate_split(cfg);
    }
    log::info!("reading dataset from {}", dir.display());
    let read = |name: &str, n: usize| {
        (0..n)
            .map(|k| read_trajectory(data_file(dir, name, k)))
            .collect::<Result<Vec<_>>>()
    };
    Ok(DatasetSplit {
        train: read("train", cfg.train_trajectories)?,
        test: read("test", cfg.test_trajectories)?,
        seed: cfg.seed,
    })
}

/// Metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub label: String,
    pub seed: u64,
    pub parameters: usize,
    pub steps: u64,
    pub one_step_rmse: f64,
    pub rollout_rmse: f64,
    pub diverged: usize,
}

pub const METRICS_HEADER: &str = "label,seed,parameters,steps,one_step_rmse,rollout_rmse,diverged";

impl RunMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.label,
            self.seed,
            self.parameters,
            self.steps,
            self.one_step_rmse,
            self.rollout_rmse,
            self.diverged
        )
    }
}

pub fn metrics_csv(rows: &[RunMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Final-layer latent distance at one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProbePoint {
    pub step: u64,
    pub distance: f64,
}

/// A trained model and its training record.
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub probe: Vec<ProbePoint>,
}

/// Mean final-layer latent distance over the mid-trajectory state of each
/// probe trajectory.
pub fn final_latent_distance(model: &Model, probe: &[Trajectory]) -> Result<f64> {
    let mut total = 0.0;
    for traj in probe {
        let ctx = model.context(&traj.mesh)?;
        let t = (traj.num_steps / 2).max(usize::from(model.config.history));
        let d = latent_distance_probe(model, &ctx, traj, t)?;
        total += d.last().copied().unwrap_or(0.0);
    }
    Ok(total / probe.len().max(1) as f64)
}

/// Options of [`train_model`] beyond the model and schedule.
#[derive(Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Directory for periodic and final checkpoints (`checkpoint.bin`).
    pub checkpoint_dir: Option<&'a Path>,
    pub checkpoint_every: Option<u64>,
    /// Latent-distance probe trajectories and period.
    pub probe: Option<(&'a [Trajectory], u64)>,
}

/// Trains a fresh model, resuming from `checkpoint_dir/checkpoint.bin` when
/// it holds a checkpoint of the same configuration.
pub fn train_model(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &[Trajectory],
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let first = data
        .first()
        .ok_or_else(|| Error::Config("training needs data".into()))?;
    let normalizer = Normalizer::fit(data, model_cfg.history)?;
    let model = Model::new(
        model_cfg.clone(),
        first.schema.clone(),
        first.mesh.dim(),
        normalizer,
    )?;
    let ckpt_path = opts.checkpoint_dir.map(|d| d.join("checkpoint.bin"));
    let mut trainer = match ckpt_path.as_deref().filter(|p| p.exists()) {
        Some(path) => match Checkpoint::load(path) {
            Ok(c) if c.model_config == *model_cfg && c.train == *train_cfg => {
                log::info!("resuming from {} at step {}", path.display(), c.step());
                Trainer::resume(&c, data)?
            }
            _ => {
                log::warn!("ignoring incompatible checkpoint {}", path.display());
                Trainer::new(model, train_cfg.clone(), data)?
            }
        },
        None => Trainer::new(model, train_cfg.clone(), data)?,
    };
    let total = trainer.total_steps();
    let mut probe = Vec::new();
    let record = |t: &Trainer, probe: &mut Vec<ProbePoint>| -> Result<()> {
        if let Some((trajs, _)) = opts.probe {
            probe.push(ProbePoint {
                step: t.step(),
                distance: final_latent_distance(&t.model, trajs)?,
            });
        }
        Ok(())
    };
    record(&trainer, &mut probe)?;
    let period = [opts.checkpoint_every, opts.probe.map(|(_, e)| e)]
        .into_iter()
        .flatten()
        .filter(|&e| e > 0)
        .min()
        .unwrap_or(total.max(1));
    while trainer.step() < total {
        let next = ((trainer.step() / period + 1) * period).min(total);
        trainer.run_until(next, |_, _| Ok(()))?;
        let step = trainer.step();
        if opts
            .probe
            .is_some_and(|(_, e)| e > 0 && (step % e == 0 || step == total))
        {
            record(&trainer, &mut probe)?;
        }
        if let (Some(path), Some(e)) = (&ckpt_path, opts.checkpoint_every) {
            if e > 0 && step % e == 0 && step < total {
                trainer.checkpoint().save(path)?;
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(path) = &ckpt_path {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome {
        log: trainer.history.clone(),
        model: trainer.model,
        checkpoint,
        probe,
    })
}

/// Rollout and one-step metrics of `model` on `data`.
pub fn evaluate_model(
    model: &Model,
    data: &[Trajectory],
    horizon: Option<usize>,
) -> Result<EvalReport> {
    let ctxs = contexts(model, data)?;
    evaluate_with(&ModelSurrogate { model, ctxs: &ctxs }, data, horizon)
}

/// Per-component noise standard deviation from a noise-free run of
/// `steps` updates: the standard deviation of its clean one-step error.
pub fn calibrate_noise(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &[Trajectory],
    steps: u64,
) -> Result<Vec<f64>> {
    let clean = TrainConfig {
        noise_std: vec![0.0],
        max_steps: Some(steps),
        ..train_cfg.clone()
    };
    let outcome = train_model(model_cfg, &clean, data, TrainOptions::default())?;
    let trainer = Trainer::new(outcome.model, clean, data)?;
    trainer.one_step_error_std()
}

/// Training schedule after optional noise calibration.
pub fn resolved_train_config(cfg: &ExperimentConfig, data: &[Trajectory]) -> Result<TrainConfig> {
    let mut train = cfg.train.clone();
    if let Some(steps) = cfg.noise_calibration_steps {
        train.noise_std = calibrate_noise(&cfg.model_for(cfg.seeds[0]), &cfg.train, data, steps)?;
        log::info!("calibrated noise std {:?}", train.noise_std);
    }
    Ok(train)
}

/// Trains one seed and evaluates it on the test split.
pub fn run_single(
    label: &str,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    split: &DatasetSplit,
    eval: &EvalConfig,
    opts: TrainOptions<'_>,
) -> Result<(RunMetrics, TrainOutcome)> {
    let outcome = train_model(model_cfg, train_cfg, &split.train, opts)?;
    let report = evaluate_model(&outcome.model, &split.test, eval.horizon)?;
    let metrics = RunMetrics {
        label: label.to_string(),
        seed: model_cfg.seed,
        parameters: outcome.model.num_parameters(),
        steps: outcome.checkpoint.step(),
        one_step_rmse: report.one_step_rmse,
        rollout_rmse: report.rollout_rmse,
        diverged: report.diverged,
    };
    Ok((metrics, outcome))
}

/// Ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    PeMode,
    MnpCenters,
    TemporalFrequency,
    GateMixer,
    AuxLosses,
    WidthVsDepth,
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::PeMode,
        Axis::MnpCenters,
        Axis::TemporalFrequency,
        Axis::GateMixer,
        Axis::AuxLosses,
        Axis::WidthVsDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::PeMode => "pe_mode",
            Axis::MnpCenters => "mnp_centers",
            Axis::TemporalFrequency => "temporal_frequency",
            Axis::GateMixer => "gate_mixer",
            Axis::AuxLosses => "aux_losses",
            Axis::WidthVsDepth => "width_vs_depth",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Axis::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!(
                    "unknown ablation axis `{s}`; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Width with the given depth whose parameter count is closest to `target`.
pub fn width_for_budget(
    base: &ModelConfig,
    layers: usize,
    target: usize,
    schema: &crate::data::FieldSchema,
    dim: usize,
) -> Result<usize> {
    let mut best: Option<(usize, usize)> = None;
    let mut width = base.heads;
    loop {
        let cfg = ModelConfig {
            layers,
            width,
            ..base.clone()
        };
        if cfg.validate().is_ok() {
            let count = parameter_count(&cfg, schema, dim)?;
            let gap = count.abs_diff(target);
            if best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, width));
            }
            if count > target {
                break;
            }
        }
        width += base.heads;
        if width > 64 * base.width.max(base.heads) {
            break;
        }
    }
    best.map(|(_, w)| w).ok_or_else(|| {
        Error::Config(format!(
            "no width gives {layers} layers a valid configuration"
        ))
    })
}

/// The cells of `axis` around the configured model and schedule.
pub fn cells(
    cfg: &ExperimentConfig,
    axis: Axis,
    schema: &crate::data::FieldSchema,
    dim: usize,
) -> Result<Vec<Cell>> {
    let base = Cell {
        label: String::new(),
        model: cfg.model.clone(),
        train: cfg.train.clone(),
    };
    let with_model = |label: String, f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        c.label = label;
        f(&mut c.model);
        c
    };
    let out = match axis {
        Axis::PeMode => [
            ("none", PeMode::None),
            ("learned_abs", PeMode::LearnedAbs),
            ("learned_relbias", PeMode::LearnedRelbias),
            ("distance_weighted", PeMode::DistanceWeighted),
            ("rope", PeMode::Rope),
        ]
        .into_iter()
        .map(|(name, pe)| with_model(name.into(), &|m| m.pe = pe))
        .collect(),
        Axis::MnpCenters => cfg
            .ablation
            .mnp_centers
            .iter()
            .map(|&c| {
                with_model(c.to_string(), &|m| {
                    m.mnp.enabled = c > 0;
                    m.mnp.centers = c;
                })
            })
            .collect(),
        Axis::TemporalFrequency => vec![
            with_model("none".into(), &|m| m.temporal.enabled = false),
            with_model("last_layer".into(), &|m| {
                m.temporal.enabled = true;
                m.temporal.frequency = CorrectorFrequency::LastLayerOnly;
            }),
            with_model("every_layer".into(), &|m| {
                m.temporal.enabled = true;
                m.temporal.frequency = CorrectorFrequency::EveryLayer;
            }),
        ],
        Axis::GateMixer => [(true, true), (true, false), (false, true), (false, false)]
            .into_iter()
            .map(|(g, x)| {
                with_model(format!("gate={g};mixer={x}"), &|m| {
                    m.temporal.enabled = true;
                    m.temporal.gate = g;
                    m.temporal.mixer = x;
                })
            })
            .collect(),
        Axis::AuxLosses => {
            let w = cfg.ablation.aux_weight;
            let mut v = Vec::new();
            for (name, set) in [
                ("none", (0.0, 0.0, 0.0)),
                ("grad_supervision", (w, 0.0, 0.0)),
                ("divergence", (0.0, w, 0.0)),
                ("cosine_sim", (0.0, 0.0, w)),
            ] {
                let mut c = base.clone();
                c.label = name.into();
                (
                    c.train.aux.grad_supervision,
                    c.train.aux.divergence,
                    c.train.aux.cosine_sim,
                ) = set;
                v.push(c);
            }
            v
        }
        Axis::WidthVsDepth => {
            let target = parameter_count(&cfg.model, schema, dim)?;
            let mut v = Vec::new();
            for &layers in &cfg.ablation.depths {
                let width = width_for_budget(&cfg.model, layers, target, schema, dim)?;
                v.push(with_model(format!("L={layers};d={width}"), &|m| {
                    m.layers = layers;
                    m.width = width;
                }));
            }
            v
        }
    };
    Ok(out)
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub label: String,
    pub parameters: usize,
    pub one_step_mean: f64,
    pub one_step_std: f64,
    pub rollout_mean: f64,
    pub rollout_std: f64,
    pub runs: Vec<RunMetrics>,
}

impl CellSummary {
    pub fn from_runs(label: &str, runs: Vec<RunMetrics>) -> Self {
        let one: Vec<f64> = runs.iter().map(|r| r.one_step_rmse).collect();
        let roll: Vec<f64> = runs.iter().map(|r| r.rollout_rmse).collect();
        let (one_step_mean, one_step_std) = mean_std(&one);
        let (rollout_mean, rollout_std) = mean_std(&roll);
        Self {
            label: label.to_string(),
            parameters: runs.first().map_or(0, |r| r.parameters),
            one_step_mean,
            one_step_std,
            rollout_mean,
            rollout_std,
            runs,
        }
    }
}

pub const SUMMARY_HEADER: &str =
    "axis,cell,parameters,seeds,one_step_mean,one_step_std,rollout_mean,rollout_std";

pub fn summary_csv(axis: &str, rows: &[CellSummary]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{axis},{},{},{},{},{},{},{}\n",
            r.label,
            r.parameters,
            r.runs.len(),
            r.one_step_mean,
            r.one_step_std,
            r.rollout_mean,
            r.rollout_std
        ));
    }
    s
}

/// Runs `jobs` on up to `threads` workers, returning results in job order.
pub fn run_parallel<T, R, F>(jobs: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: std::sync::Mutex<Vec<Option<R>>> =
        std::sync::Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Trains and evaluates every `(cell, seed)` pair.
pub fn sweep(
    cfg: &ExperimentConfig,
    cells: &[Cell],
    split: &DatasetSplit,
    threads: usize,
    run_dir: Option<&Path>,
) -> Result<Vec<CellSummary>> {
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results = run_parallel(&jobs, threads, |&(c, seed)| {
        let cell = &cells[c];
        let model = ModelConfig {
            seed,
            ..cell.model.clone()
        };
        let dir = run_dir.map(|d| d.join(sanitize(&cell.label)).join(format!("seed{seed}")));
        let opts = TrainOptions {
            checkpoint_dir: dir.as_deref(),
            checkpoint_every: cfg.checkpoint_every,
            probe: None,
        };
        run_single(&cell.label, &model, &cell.train, split, &cfg.eval, opts).map(|(m, _)| m)
    });
    let mut by_cell: Vec<Vec<RunMetrics>> = vec![Vec::new(); cells.len()];
    for (&(c, _), r) in jobs.iter().zip(results) {
        by_cell[c].push(r?);
    }
    Ok(cells
        .iter()
        .zip(by_cell)
        .map(|(cell, runs)| CellSummary::from_runs(&cell.label, runs))
        .collect())
}

/// File-name-safe version of a cell label.
pub fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Checks that two configurations are within `tolerance` in parameter count.
pub fn params_match(
    a: &ModelConfig,
    b: &ModelConfig,
    schema: &crate::data::FieldSchema,
    dim: usize,
    tolerance: f64,
) -> Result<bool> {
    Ok(relative_gap(
        parameter_count(a, schema, dim)?,
        parameter_count(b, schema, dim)?,
    ) <= tolerance)
}
