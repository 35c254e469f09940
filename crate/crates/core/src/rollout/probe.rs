//! Probes of what each processor layer encodes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{node_features, Trajectory};
use crate::error::{Error, Result};
use crate::model::{MeshContext, Model};
use crate::nn::{Init, Mlp};
use crate::rng::{derive_seed, stream};
use crate::theory::{WlsOperator, WlsWeighting};
use crate::train::{AdamW, OptimizerConfig};

/// `‖Z^ℓ − E(x_{t+1})‖₂` averaged over nodes, for `ℓ = 0..=L`.
pub fn latent_distance_probe(
    model: &Model,
    ctx: &MeshContext,
    traj: &Trajectory,
    t: usize,
) -> Result<Vec<f64>> {
    if t + 1 >= traj.num_steps {
        return Err(Error::Config(format!("no next step after t = {t}")));
    }
    let tape = Tape::new();
    let p = model.params.bind_constant(&tape);
    let history = model.config.history;
    let fwd = model.forward(&p, ctx, &node_features(traj, t, history)?)?;
    let target = model
        .encode(&p, ctx, &node_features(traj, t + 1, history)?)?
        .value();
    Ok(fwd
        .latents
        .iter()
        .map(|z| mean_row_distance(&z.value(), &target))
        .collect())
}

fn mean_row_distance(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / a.rows() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Next-step velocity components.
    Velocity,
    /// Next-step pressure-like scalar.
    Pressure,
    /// Frobenius norm of the WLS velocity gradient at the next step.
    GradientMagnitude,
    /// Current-step input features; sanity task.
    Input,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    /// Fraction of samples held out, taken from the end of the sample list.
    pub holdout: f64,
    pub seed: u64,
    /// Permute targets across rows before fitting.
    pub shuffle_targets: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 400,
            lr: 3e-3,
            holdout: 0.25,
            seed: 0,
            shuffle_targets: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub tasks: Vec<ProbeTask>,
    /// `loss[task][layer]`: held-out MSE on standardized targets.
    pub loss: Vec<Vec<f64>>,
    /// Held-out variance of each standardized target, the loss of a mean predictor.
    pub variance: Vec<f64>,
}

fn task_targets(
    task: ProbeTask,
    model: &Model,
    traj: &Trajectory,
    t: usize,
    wls: &WlsOperator,
) -> Result<Tensor> {
    let roles = super::BcComponents::from_schema(&traj.schema);
    let c = traj.num_components();
    let next = traj.state_f64(t + 1);
    let n = traj.num_nodes();
    let pick = |cols: &[usize]| {
        let mut out = Tensor::zeros(n, cols.len());
        for i in 0..n {
            for (k, &ci) in cols.iter().enumerate() {
                out.set(i, k, next[i * c + ci]);
            }
        }
        out
    };
    Ok(match task {
        ProbeTask::Velocity => pick(&roles.velocity),
        ProbeTask::Pressure => pick(&roles.scalar),
        ProbeTask::GradientMagnitude => {
            let grads = wls.gradient(&pick(&roles.velocity))?;
            let mut out = Tensor::zeros(n, 1);
            for i in 0..n {
                let s: f64 = grads
                    .iter()
                    .map(|g| g.row(i).iter().map(|x| x * x).sum::<f64>())
                    .sum();
                out.set(i, 0, s.sqrt());
            }
            out
        }
        ProbeTask::Input => node_features(traj, t, model.config.history)?.dynamical(),
    })
}

fn stack(parts: &[Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    Tensor::from_vec(data.len() / cols.max(1), cols, data).expect("consistent widths")
}

fn standardize(t: &mut Tensor, rows: usize) {
    for c in 0..t.cols() {
        let mean = (0..rows).map(|r| t.get(r, c)).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (t.get(r, c) - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = var.sqrt().max(1e-12);
        for r in 0..t.rows() {
            t.set(r, c, (t.get(r, c) - mean) / sd);
        }
    }
}

fn select(t: &Tensor, rows: std::ops::Range<usize>) -> Tensor {
    let cols = t.cols();
    Tensor::from_vec(
        rows.len(),
        cols,
        t.data()[rows.start * cols..rows.end * cols].to_vec(),
    )
    .expect("row range")
}

/// Fits a fresh two-layer MLP per `(layer, task)` on frozen latents of the
/// given `(trajectory, t)` samples and reports held-out losses.
pub fn subtask_probe(
    model: &Model,
    ctxs: &[MeshContext],
    data: &[Trajectory],
    samples: &[(usize, usize)],
    tasks: &[ProbeTask],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if samples.len() < 2 {
        return Err(Error::Config("probing needs at least two samples".into()));
    }
    let layers = model.config.layers + 1;
    let mut latents: Vec<Vec<Tensor>> = vec![Vec::new(); layers];
    let mut targets: Vec<Vec<Tensor>> = vec![Vec::new(); tasks.len()];
    let mut ops: Vec<Option<WlsOperator>> = vec![None; data.len()];
    for &(k, t) in samples {
        let traj = &data[k];
        let tape = Tape::new();
        let p = model.params.bind_constant(&tape);
        let fwd = model.forward(&p, &ctxs[k], &node_features(traj, t, model.config.history)?)?;
        for (l, z) in fwd.latents.iter().enumerate() {
            latents[l].push(z.value());
        }
        if ops[k].is_none() {
            ops[k] = Some(WlsOperator::new(&traj.mesh, WlsWeighting::Uniform)?);
        }
        for (j, &task) in tasks.iter().enumerate() {
            targets[j].push(task_targets(
                task,
                model,
                traj,
                t,
                ops[k].as_ref().expect("built above"),
            )?);
        }
    }
    let held = ((samples.len() as f64 * cfg.holdout).round() as usize).clamp(1, samples.len() - 1);
    let train_rows: usize = latents[0][..samples.len() - held]
        .iter()
        .map(Tensor::rows)
        .sum();
    let mut report = ProbeReport {
        tasks: tasks.to_vec(),
        loss: vec![Vec::with_capacity(layers); tasks.len()],
        variance: Vec::with_capacity(tasks.len()),
    };
    for (j, parts) in targets.iter().enumerate() {
        let mut y = stack(parts);
        if cfg.shuffle_targets {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..y.rows()).collect();
            perm.shuffle(&mut stream(cfg.seed, &[20, j as u64]));
            let c = y.cols();
            let mut shuffled = Tensor::zeros(y.rows(), c);
            for (r, &src) in perm.iter().enumerate() {
                shuffled.row_mut(r).copy_from_slice(y.row(src));
            }
            y = shuffled;
        }
        standardize(&mut y, train_rows);
        let y_train = select(&y, 0..train_rows);
        let y_test = select(&y, train_rows..y.rows());
        let mut var = 0.0;
        for c in 0..y_test.cols() {
            let col: Vec<f64> = (0..y_test.rows()).map(|r| y_test.get(r, c)).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            var += col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
        }
        report.variance.push(var / y_test.cols() as f64);
        for (l, zs) in latents.iter().enumerate() {
            let mut x = stack(zs);
            standardize(&mut x, train_rows);
            let x_train = select(&x, 0..train_rows);
            let x_test = select(&x, train_rows..x.rows());
            let seed = derive_seed(cfg.seed, &[21, j as u64, l as u64]);
            report.loss[j].push(fit_probe(&x_train, &y_train, &x_test, &y_test, cfg, seed)?);
        }
    }
    Ok(report)
}

/// Full-batch AdamW fit; returns the held-out MSE.
fn fit_probe(
    x: &Tensor,
    y: &Tensor,
    x_test: &Tensor,
    y_test: &Tensor,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let mut store = crate::autodiff::ParamStore::new();
    let mlp = Mlp::new(
        &mut store,
        "probe",
        [x.cols(), cfg.hidden, y.cols()],
        Init::He,
        &mut stream(seed, &[]),
    );
    let opt_cfg = OptimizerConfig {
        max_lr: cfg.lr,
        warmup_steps: 1,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(store.tensors());
    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let grads = {
            let p = store.bind(&tape);
            let out = mlp.forward(&p, tape.constant(x.clone()))?;
            let loss = out.sub(tape.constant(y.clone()))?.square().mean();
            tape.backward(loss)?;
            p.grads()
        };
        let names = store.names().to_vec();
        opt.update(store.tensors_mut(), &grads, &names, cfg.lr, &opt_cfg)?;
    }
    let tape = Tape::new();
    let p = store.bind_constant(&tape);
    let out = mlp.forward(&p, tape.constant(x_test.clone()))?;
    Ok(out
        .sub(tape.constant(y_test.clone()))?
        .square()
        .mean()
        .item())
}
