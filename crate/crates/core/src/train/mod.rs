//! Next-step training with multi-node prediction and auxiliary losses.

mod checkpoint;
mod optim;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use optim::{lr_at, AdamW, OptimizerConfig, ADAM_EPS};

use crate::autodiff::{Bound, Tape, Tensor, Var};
use crate::data::{add_training_noise, node_features, NoiseSpec, Trajectory};
use crate::error::{Error, Result};
use crate::mnp::{combine_losses, sample_centers};
use crate::model::{MeshContext, Model};
use crate::rng::{derive_seed, stream};
use crate::rollout::{scalar_enforced, velocity_enforced, BcComponents};
use crate::theory::{WlsOperator, WlsWeighting};

/// Weights of the optional auxiliary objectives; zero disables a term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxLosses {
    /// `ℓ(∇ŷ, ∇y)` with WLS gradients.
    pub grad_supervision: f64,
    /// Mean squared WLS divergence of the predicted velocity.
    pub divergence: f64,
    /// `1 −` mean per-node cosine between predicted and true next states.
    pub cosine_sim: f64,
    pub weighting: WlsWeighting,
}

impl AuxLosses {
    pub fn any(&self) -> bool {
        self.grad_supervision != 0.0 || self.divergence != 0.0 || self.cosine_sim != 0.0
    }

    fn needs_wls(&self) -> bool {
        self.grad_supervision != 0.0 || self.divergence != 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Passes over all `(trajectory, t)` pairs.
    pub epochs: usize,
    /// Optional cap on optimizer updates; the schedule spans the capped length.
    pub max_steps: Option<u64>,
    pub optimizer: OptimizerConfig,
    /// Input noise deviation per dynamical component, or one value for all.
    pub noise_std: Vec<f64>,
    pub aux: AuxLosses,
    /// Drop boundary-enforced nodes from the main loss.
    pub exclude_enforced: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            max_steps: None,
            optimizer: OptimizerConfig::default(),
            noise_std: vec![1e-3],
            aux: AuxLosses::default(),
            exclude_enforced: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("noise deviations must be nonnegative".into()));
        }
        for w in [
            self.aux.grad_supervision,
            self.aux.divergence,
            self.aux.cosine_sim,
        ] {
            if !(w >= 0.0) {
                return Err(Error::Config(
                    "auxiliary loss weights must be nonnegative".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn noise(&self, components: usize) -> Result<NoiseSpec> {
        match self.noise_std.len() {
            0 => Ok(NoiseSpec::uniform(0.0, components)),
            1 => Ok(NoiseSpec::uniform(self.noise_std[0], components)),
            n if n == components => Ok(NoiseSpec {
                sigma: self.noise_std.clone(),
            }),
            n => Err(Error::Config(format!(
                "{n} noise deviations for {components} dynamical components"
            ))),
        }
    }
}

/// Scalar losses of one update.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub main: f64,
    pub mnp: f64,
    pub intermediate: f64,
    pub grad_supervision: f64,
    pub divergence: f64,
    pub cosine: f64,
    pub total: f64,
    pub wall_seconds: f64,
}

pub const LOG_HEADER: &str =
    "step,lr,l_main,l_mnp,l_intermediate,l_grad,l_div,l_cos,l_total,wall_s";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.3}",
            self.step,
            self.lr,
            self.main,
            self.mnp,
            self.intermediate,
            self.grad_supervision,
            self.divergence,
            self.cosine,
            self.total,
            self.wall_seconds
        )
    }
}

/// Tape values of every loss term for one `(trajectory, t)` pair.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub main: Var<'t>,
    pub mnp: Option<Var<'t>>,
    pub intermediate: Option<Var<'t>>,
    pub grad_supervision: Option<Var<'t>>,
    pub divergence: Option<Var<'t>>,
    pub cosine: Option<Var<'t>>,
}

/// Dynamical components of `state` replaced by the (noisy) feature values.
fn state_with_dynamics(model: &Model, state: &[f64], dynamics: &Tensor) -> Vec<f64> {
    let c = model.schema.len();
    let mut out = state.to_vec();
    for (k, &ci) in model.schema.dynamical_indices().iter().enumerate() {
        for i in 0..dynamics.rows() {
            out[i * c + ci] = dynamics.get(i, k);
        }
    }
    out
}

/// `N × k` dynamical block of an `N × C` state.
fn dynamics_of(model: &Model, state: &[f64]) -> Tensor {
    let c = model.schema.len();
    let idx = model.schema.dynamical_indices();
    let n = state.len() / c;
    let mut t = Tensor::zeros(n, idx.len());
    for i in 0..n {
        for (k, &ci) in idx.iter().enumerate() {
            t.set(i, k, state[i * c + ci]);
        }
    }
    t
}

/// Row-wise mean of `Σ_c x²`, optionally restricted to rows with mask one.
fn mean_row_energy<'t>(x: Var<'t>, mask: Option<&Tensor>) -> Result<Var<'t>> {
    let e = x.square().sum_cols();
    match mask {
        Some(m) => {
            let count = m.sum().max(1.0);
            Ok(e.mul_col(x.tape().constant(m.clone()))?
                .sum()
                .scale(1.0 / count))
        }
        None => Ok(e.mean()),
    }
}

/// Per-trajectory structures shared by every update on it.
struct Prepared {
    ctx: MeshContext,
    wls: Option<WlsOperator>,
    free_mask: Option<Tensor>,
}

pub struct Trainer<'d> {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    data: &'d [Trajectory],
    prepared: Vec<Prepared>,
    pairs: Vec<(usize, usize)>,
    pub history: Vec<StepLog>,
    start: Instant,
}

impl<'d> Trainer<'d> {
    pub fn new(model: Model, config: TrainConfig, data: &'d [Trajectory]) -> Result<Self> {
        config.validate()?;
        config.noise(model.outputs())?;
        if data.is_empty() {
            return Err(Error::Config(
                "training needs at least one trajectory".into(),
            ));
        }
        let first_t = usize::from(model.config.history);
        let mut pairs = Vec::new();
        let mut prepared = Vec::with_capacity(data.len());
        for (k, traj) in data.iter().enumerate() {
            if traj.schema != model.schema {
                return Err(Error::Config(format!(
                    "trajectory {k} has a different field schema"
                )));
            }
            pairs.extend((first_t..traj.num_steps.saturating_sub(1)).map(|t| (k, t)));
            let free_mask = config.exclude_enforced.then(|| {
                let types = traj.mesh.node_types();
                let v = types
                    .iter()
                    .map(|&t| f64::from(u8::from(!velocity_enforced(t))))
                    .collect();
                Tensor::from_vec(types.len(), 1, v).expect("mask shape")
            });
            prepared.push(Prepared {
                ctx: model.context(&traj.mesh)?,
                wls: config
                    .aux
                    .needs_wls()
                    .then(|| WlsOperator::new(&traj.mesh, config.aux.weighting))
                    .transpose()?,
                free_mask,
            });
        }
        if pairs.is_empty() {
            return Err(Error::Config(
                "trajectories are too short to form training pairs".into(),
            ));
        }
        Ok(Self {
            optimizer: AdamW::new(model.params.tensors()),
            model,
            config,
            data,
            prepared,
            pairs,
            history: Vec::new(),
            start: Instant::now(),
        })
    }

    /// Restores parameters, moments and step from a checkpoint.
    pub fn resume(checkpoint: &Checkpoint, data: &'d [Trajectory]) -> Result<Self> {
        let model = checkpoint.model()?;
        let mut t = Self::new(model, checkpoint.train.clone(), data)?;
        t.optimizer = checkpoint.optimizer.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.optimizer, &self.config)
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn total_steps(&self) -> u64 {
        let full = (self.config.epochs * self.pairs.len()) as u64;
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn context(&self, trajectory: usize) -> &MeshContext {
        &self.prepared[trajectory].ctx
    }

    /// `(trajectory, t)` consumed by the update after `step` completed ones.
    pub fn pair_at(&self, step: u64) -> (usize, usize) {
        let p = self.pairs.len() as u64;
        let epoch = step / p;
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut stream(self.model.config.seed, &[10, epoch]));
        self.pairs[order[(step % p) as usize]]
    }

    /// All loss terms for one pair. `noise_seed = None` feeds clean inputs
    /// and uses no MNP resampling stream other than `mnp_seed`.
    pub fn losses<'t>(
        &self,
        p: &Bound<'t>,
        traj_index: usize,
        t: usize,
        noise_seed: Option<u64>,
        mnp_seed: u64,
    ) -> Result<LossTerms<'t>> {
        let model = &self.model;
        let traj = &self.data[traj_index];
        let prep = &self.prepared[traj_index];
        let tape = p.vars()[0].tape();
        let clean = node_features(traj, t, model.config.history)?;
        let features = match noise_seed {
            Some(seed) => add_training_noise(&clean, &self.config.noise(model.outputs())?, seed)?,
            None => clean,
        };
        let noisy_state = state_with_dynamics(model, &traj.state_f64(t), &features.dynamical());
        let next = traj.state_f64(t + 1);
        let target = model.target_tensor(&noisy_state, &next)?;
        let fwd = model.forward(p, &prep.ctx, &features)?;
        let y = tape.constant(target);
        let main = mean_row_energy(fwd.output.sub(y)?, prep.free_mask.as_ref())?;
        let mut total = main;

        let mnp = match &model.mnp {
            Some(head) => {
                let internal = traj.mesh.internal_nodes().len();
                let m = head.config.centers.min(internal);
                let centers = sample_centers(&traj.mesh, m, &mut stream(mnp_seed, &[]))?;
                let batch = head.stars(&traj.mesh, &centers)?;
                let z_last = *fwd.latents.last().expect("latents");
                let l = head.loss(p, z_last, fwd.latents[0], &batch, |o| model.decode(p, o), y)?;
                total = combine_losses(total, l, head.config.alpha)?;
                Some(l)
            }
            None => None,
        };

        let intermediate =
            if model.config.temporal.intermediate_supervision && fwd.corrected.len() > 1 {
                let k = fwd.corrected.len() - 1;
                let mut acc: Option<Var<'t>> = None;
                for z in &fwd.corrected[..k] {
                    let l = mean_row_energy(model.decode(p, *z)?.sub(y)?, prep.free_mask.as_ref())?;
                    acc = Some(match acc {
                        Some(a) => a.add(l)?,
                        None => l,
                    });
                }
                let l = acc
                    .expect("at least one intermediate state")
                    .scale(1.0 / k as f64);
                total = total.add(l)?;
                Some(l)
            } else {
                None
            };

        let aux = &self.config.aux;
        let scales = tape.constant(Tensor::from_vec(
            1,
            model.outputs(),
            model.normalizer.target_scale.clone(),
        )?);
        let predicted_next = || -> Result<Var<'t>> {
            tape.constant(dynamics_of(model, &noisy_state))
                .add(fwd.output.mul_row(scales)?)
        };
        let grad_supervision = if aux.grad_supervision != 0.0 {
            let wls = prep.wls.as_ref().expect("operator built when enabled");
            let diff = fwd.output.sub(y)?;
            let mut acc: Option<Var<'t>> = None;
            for g in wls.gradient_var(diff)? {
                let e = g.square().sum_cols();
                acc = Some(match acc {
                    Some(a) => a.add(e)?,
                    None => e,
                });
            }
            let l = wls.valid_mean(acc.expect("dim >= 1"))?;
            total = total.add(l.scale(aux.grad_supervision))?;
            Some(l)
        } else {
            None
        };
        let divergence = if aux.divergence != 0.0 {
            let wls = prep.wls.as_ref().expect("operator built when enabled");
            let div = wls.divergence_var(predicted_next()?)?;
            let l = wls.valid_mean(div.square())?;
            total = total.add(l.scale(aux.divergence))?;
            Some(l)
        } else {
            None
        };
        let cosine = if aux.cosine_sim != 0.0 {
            let pred = predicted_next()?;
            let truth = tape.constant(dynamics_of(model, &next));
            let dot = pred.mul(truth)?.sum_cols().add_scalar(1e-12);
            let inv_p = pred.square().sum_cols().add_scalar(1e-12).rsqrt();
            let inv_t = truth.square().sum_cols().add_scalar(1e-12).rsqrt();
            let l = dot
                .mul(inv_p)?
                .mul(inv_t)?
                .mean()
                .scale(-1.0)
                .add_scalar(1.0);
            total = total.add(l.scale(aux.cosine_sim))?;
            Some(l)
        } else {
            None
        };
        Ok(LossTerms {
            total,
            main,
            mnp,
            intermediate,
            grad_supervision,
            divergence,
            cosine,
        })
    }

    /// One optimizer update on the next scheduled pair.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.optimizer.step;
        let (k, t) = self.pair_at(step);
        let seed = self.model.config.seed;
        let lr = lr_at(step + 1, self.total_steps(), &self.config.optimizer);
        let tape = Tape::new();
        let (log, grads) = {
            let p = self.model.params.bind(&tape);
            let terms = self.losses(
                &p,
                k,
                t,
                Some(derive_seed(seed, &[11, step])),
                derive_seed(seed, &[12, step]),
            )?;
            tape.backward(terms.total)?;
            let item = |v: Option<Var<'_>>| v.map_or(0.0, |v| v.item());
            let log = StepLog {
                step: step + 1,
                lr,
                main: terms.main.item(),
                mnp: item(terms.mnp),
                intermediate: item(terms.intermediate),
                grad_supervision: item(terms.grad_supervision),
                divergence: item(terms.divergence),
                cosine: item(terms.cosine),
                total: terms.total.item(),
                wall_seconds: self.start.elapsed().as_secs_f64(),
            };
            (log, p.grads())
        };
        let names = self.model.params.names().to_vec();
        self.optimizer
            .update(
                self.model.params.tensors_mut(),
                &grads,
                &names,
                lr,
                &self.config.optimizer,
            )
            .inspect_err(|_| {
                log::error!("aborting at update {} on trajectory {k}, t = {t}", step + 1)
            })?;
        self.history.push(log.clone());
        Ok(log)
    }

    /// Runs until `until` updates are complete, calling `observe` after each.
    pub fn run_until<F>(&mut self, until: u64, mut observe: F) -> Result<()>
    where
        F: FnMut(&Self, &StepLog) -> Result<()>,
    {
        let until = until.min(self.total_steps());
        while self.optimizer.step < until {
            let log = self.train_step()?;
            observe(self, &log)?;
        }
        Ok(())
    }

    /// Runs the full schedule.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps(), |_, _| Ok(()))
    }

    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        writeln!(f, "{LOG_HEADER}")?;
        for row in &self.history {
            writeln!(f, "{}", row.csv_row())?;
        }
        f.flush()?;
        Ok(())
    }

    /// Standard deviation of the clean one-step error per dynamical
    /// component, in physical units, over every training pair. Entries that
    /// rollouts overwrite with boundary values are left out.
    pub fn one_step_error_std(&self) -> Result<Vec<f64>> {
        let k = self.model.outputs();
        let roles = BcComponents::from_schema(&self.model.schema);
        let dyn_idx = self.model.schema.dynamical_indices();
        let mut sum = vec![0.0; k];
        let mut sq = vec![0.0; k];
        let mut count = vec![0.0f64; k];
        for &(traj, t) in &self.pairs {
            let tape = Tape::new();
            let p = self.model.params.bind_constant(&tape);
            let f = node_features(&self.data[traj], t, self.model.config.history)?;
            let out = self
                .model
                .forward(&p, &self.prepared[traj].ctx, &f)?
                .output
                .value();
            let target = self.model.target_tensor(
                &self.data[traj].state_f64(t),
                &self.data[traj].state_f64(t + 1),
            )?;
            let types = self.data[traj].mesh.node_types();
            for i in 0..out.rows() {
                for c in 0..k {
                    let ci = dyn_idx[c];
                    if (roles.velocity.contains(&ci) && velocity_enforced(types[i]))
                        || (roles.scalar.contains(&ci) && scalar_enforced(types[i]))
                    {
                        continue;
                    }
                    let e =
                        (out.get(i, c) - target.get(i, c)) * self.model.normalizer.target_scale[c];
                    sum[c] += e;
                    sq[c] += e * e;
                    count[c] += 1.0;
                }
            }
        }
        Ok((0..k)
            .map(|c| {
                let n = count[c].max(1.0);
                let m = sum[c] / n;
                (sq[c] / n - m * m).max(0.0).sqrt()
            })
            .collect())
    }
}
