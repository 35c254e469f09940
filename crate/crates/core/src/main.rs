use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use meshrollout::autodiff::Precision;
use meshrollout::data::{generate_split, DatasetSplit};
use meshrollout::experiment::{
    cells, load_or_generate, metrics_csv, resolved_train_config, run_parallel, run_single,
    summary_csv, sweep, write_dataset, write_manifest, write_text, Axis, ExperimentConfig,
    ProbePoint, RunMetrics, TrainOptions,
};
use meshrollout::rollout::{evaluate_with, series_csv, GroundTruth, ModelSurrogate};
use meshrollout::train::{Checkpoint, StepLog, LOG_HEADER};
use meshrollout::{theory, Error, Result};

#[derive(Parser)]
#[command(
    name = "meshrollout",
    version,
    about = "Train and evaluate mesh-based learned simulators"
)]
struct Cli {
    /// TOML experiment configuration; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, overriding `seeds`.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test trajectories.
    Generate,
    /// Train one model per seed and evaluate it on the test split.
    Train,
    /// Evaluate checkpoints, or the ground-truth oracle, on the test split.
    Eval {
        /// Checkpoints to evaluate; defaults to those written by `train`.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Evaluate the predictor that returns the stored next state.
        #[arg(long)]
        oracle: bool,
    },
    /// Sweep one or more ablation axes over every seed.
    Ablate {
        /// pe_mode, mnp_centers, temporal_frequency, gate_mixer, aux_losses,
        /// width_vs_depth, or all.
        #[arg(long, required = true, value_delimiter = ',')]
        axis: Vec<String>,
    },
    /// Run the numerical theory suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match std::env::var("MESHROLLOUT_PRECISION").as_deref() {
        Ok("f32") => Precision::set_process_default(Precision::F32),
        Ok("f64") | Err(_) => Precision::set_process_default(Precision::F64),
        Ok(other) => {
            return Err(Error::Config(format!(
                "MESHROLLOUT_PRECISION must be f32 or f64, got `{other}`"
            )));
        }
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(seeds) = cli.seeds {
        cfg.seeds = seeds;
    }
    cfg.validate()?;
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Generate => generate(&cfg),
        Command::Train => train(&cfg, threads),
        Command::Eval { checkpoint, oracle } => eval(&cfg, &checkpoint, oracle),
        Command::Ablate { axis } => ablate(&cfg, &axis, threads),
        Command::Verify { seed } => verify(&cfg, seed),
    }
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

fn relative(base: &Path, path: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn generate(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let split = generate_split(&cfg.dataset)?;
    let paths = write_dataset(&data_dir(cfg), &cfg.dataset, &split)?;
    let outputs: Vec<String> = paths.iter().map(|p| relative(&cfg.out_dir, p)).collect();
    write_manifest(&cfg.out_dir, "generate", cfg, &outputs)?;
    println!(
        "wrote {} train and {} test trajectories to {}",
        split.train.len(),
        split.test.len(),
        data_dir(cfg).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_split(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    let split = load_or_generate(&cfg.dataset, &data_dir(cfg))?;
    if split.test.is_empty() {
        return Err(Error::Config(
            "evaluation needs at least one test trajectory".into(),
        ));
    }
    Ok(split)
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join("train").join(format!("seed{seed}"))
}

fn log_csv(log: &[StepLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for row in log {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    s
}

fn train(cfg: &ExperimentConfig, threads: usize) -> Result<ExitCode> {
    let split = load_split(cfg)?;
    let train_cfg = resolved_train_config(cfg, &split.train)?;
    let probe_trajs = &split.test[..cfg.eval.probe_trajectories.min(split.test.len())];
    let results = run_parallel(
        &cfg.seeds,
        threads,
        |&seed| -> Result<(RunMetrics, Vec<ProbePoint>)> {
            let dir = seed_dir(cfg, seed);
            let opts = TrainOptions {
                checkpoint_dir: Some(&dir),
                checkpoint_every: cfg.checkpoint_every,
                probe: cfg.eval.probe_every.map(|e| (probe_trajs, e)),
            };
            let (metrics, outcome) = run_single(
                "model",
                &cfg.model_for(seed),
                &train_cfg,
                &split,
                &cfg.eval,
                opts,
            )?;
            write_text(&dir.join("train_log.csv"), &log_csv(&outcome.log))?;
            log::info!(
                "seed {seed}: one-step {:.6e}, rollout {:.6e}",
                metrics.one_step_rmse,
                metrics.rollout_rmse
            );
            Ok((metrics, outcome.probe))
        },
    );
    let mut metrics = Vec::new();
    let mut probes = Vec::new();
    for r in results {
        let (m, p) = r?;
        probes.push((m.seed, p));
        metrics.push(m);
    }
    let mut outputs = vec!["metrics.csv".to_string(), "report.json".to_string()];
    write_text(&cfg.out_dir.join("metrics.csv"), &metrics_csv(&metrics))?;
    if cfg.eval.probe_every.is_some() {
        let mut s = String::from("seed,step,final_layer_distance\n");
        for (seed, points) in &probes {
            for p in points {
                s.push_str(&format!("{seed},{},{}\n", p.step, p.distance));
            }
        }
        write_text(&cfg.out_dir.join("probe.csv"), &s)?;
        outputs.push("probe.csv".into());
    }
    let report = json!({
        "config_hash": cfg.hash(),
        "noise_std": train_cfg.noise_std,
        "runs": metrics,
    });
    write_text(
        &cfg.out_dir.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("json"),
    )?;
    for seed in &cfg.seeds {
        outputs.push(relative(
            &cfg.out_dir,
            &seed_dir(cfg, *seed).join("checkpoint.bin"),
        ));
    }
    write_manifest(&cfg.out_dir, "train", cfg, &outputs)?;
    print!("{}", metrics_csv(&metrics));
    Ok(ExitCode::SUCCESS)
}

fn eval(cfg: &ExperimentConfig, checkpoints: &[PathBuf], oracle: bool) -> Result<ExitCode> {
    let split = load_split(cfg)?;
    let dir = cfg.out_dir.join("eval");
    let mut rows = Vec::new();
    let mut outputs = vec!["metrics.csv".to_string()];
    let write_series = |label: &str, steps: &[f64], outputs: &mut Vec<String>| -> Result<()> {
        let name = format!("step_rmse_{label}.csv");
        write_text(&dir.join(&name), &series_csv("step,rmse", steps))?;
        outputs.push(name);
        Ok(())
    };
    if oracle {
        let report = evaluate_with(&GroundTruth, &split.test, cfg.eval.horizon)?;
        write_series("oracle", &report.step_rmse, &mut outputs)?;
        rows.push(RunMetrics {
            label: "oracle".into(),
            seed: 0,
            parameters: 0,
            steps: 0,
            one_step_rmse: report.one_step_rmse,
            rollout_rmse: report.rollout_rmse,
            diverged: report.diverged,
        });
    } else {
        let paths: Vec<PathBuf> = if checkpoints.is_empty() {
            cfg.seeds
                .iter()
                .map(|&s| seed_dir(cfg, s).join("checkpoint.bin"))
                .collect()
        } else {
            checkpoints.to_vec()
        };
        for (k, path) in paths.iter().enumerate() {
            let ckpt = Checkpoint::load(path)?;
            let model = ckpt.model()?;
            let ctxs = meshrollout::rollout::contexts(&model, &split.test)?;
            let report = evaluate_with(
                &ModelSurrogate {
                    model: &model,
                    ctxs: &ctxs,
                },
                &split.test,
                cfg.eval.horizon,
            )?;
            let label = format!("checkpoint{k}");
            write_series(&label, &report.step_rmse, &mut outputs)?;
            rows.push(RunMetrics {
                label,
                seed: model.config.seed,
                parameters: model.num_parameters(),
                steps: ckpt.step(),
                one_step_rmse: report.one_step_rmse,
                rollout_rmse: report.rollout_rmse,
                diverged: report.diverged,
            });
        }
    }
    write_text(&dir.join("metrics.csv"), &metrics_csv(&rows))?;
    write_manifest(&dir, "eval", cfg, &outputs)?;
    print!("{}", metrics_csv(&rows));
    Ok(ExitCode::SUCCESS)
}

fn ablate(cfg: &ExperimentConfig, axes: &[String], threads: usize) -> Result<ExitCode> {
    let axes: Vec<Axis> = if axes.iter().any(|a| a == "all") {
        Axis::ALL.to_vec()
    } else {
        axes.iter().map(|a| a.parse()).collect::<Result<_>>()?
    };
    let split = load_split(cfg)?;
    let first = &split.train[0];
    let base = ExperimentConfig {
        train: resolved_train_config(cfg, &split.train)?,
        ..cfg.clone()
    };
    for axis in axes {
        let dir = cfg.out_dir.join("ablate").join(axis.name());
        let c = cells(&base, axis, &first.schema, first.mesh.dim())?;
        let rows = sweep(&base, &c, &split, threads, Some(&dir))?;
        let summary = summary_csv(axis.name(), &rows);
        let runs: Vec<RunMetrics> = rows.iter().flat_map(|r| r.runs.clone()).collect();
        write_text(&dir.join("summary.csv"), &summary)?;
        write_text(&dir.join("runs.csv"), &metrics_csv(&runs))?;
        write_manifest(
            &dir,
            &format!("ablate {axis}"),
            cfg,
            &["summary.csv".into(), "runs.csv".into()],
        )?;
        print!("{summary}");
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(cfg: &ExperimentConfig, seed: u64) -> Result<ExitCode> {
    let gradient = theory::gradient_suite(seed)?;
    let stability = theory::stability_suite(seed)?;
    let checks: Vec<&theory::Check> = gradient.checks.iter().chain(&stability.checks).collect();
    for c in &checks {
        println!("{c}");
    }
    println!(
        "gradient suite {:.3} s, stability suite {:.3} s",
        gradient.seconds, stability.seconds
    );
    let dir = cfg.out_dir.join("verify");
    let report = json!({ "seed": seed, "checks": checks });
    write_text(
        &dir.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("json"),
    )?;
    write_manifest(&dir, "verify", cfg, &["report.json".into()])?;
    Ok(if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
