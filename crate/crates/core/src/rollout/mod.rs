//! Autoregressive rollout with boundary enforcement and error metrics.

mod probe;

use serde::Serialize;

pub use probe::{latent_distance_probe, subtask_probe, ProbeConfig, ProbeReport, ProbeTask};

use crate::autodiff::Tape;
use crate::data::{FieldSchema, NodeFeatures, Trajectory};
use crate::error::{Error, Result};
use crate::mesh::NodeType;
use crate::model::{MeshContext, Model};

/// A rollout stops once any magnitude exceeds this multiple of the initial maximum.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Velocity is prescribed everywhere except in the interior and at outflows.
pub fn velocity_enforced(t: NodeType) -> bool {
    !matches!(t, NodeType::Normal | NodeType::Outflow)
}

/// The pressure-like scalar is prescribed at inflows only.
pub fn scalar_enforced(t: NodeType) -> bool {
    t == NodeType::Inflow
}

/// Component roles for boundary enforcement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BcComponents {
    pub velocity: Vec<usize>,
    pub scalar: Vec<usize>,
    /// Non-dynamical components, always read from ground truth.
    pub forcing: Vec<usize>,
}

impl BcComponents {
    /// Dynamical `v*` components are velocity; `s` and `p` are pressure-like.
    pub fn from_schema(schema: &FieldSchema) -> Self {
        let mut out = Self {
            velocity: Vec::new(),
            scalar: Vec::new(),
            forcing: schema.forcing_indices(),
        };
        for i in schema.dynamical_indices() {
            match schema.names[i].as_str() {
                "s" | "p" | "pressure" => out.scalar.push(i),
                n if n.starts_with('v') => out.velocity.push(i),
                _ => {}
            }
        }
        out
    }
}

/// Overwrites prescribed entries of an `N × C` state with the truth.
pub fn enforce_bc(
    pred: &[f64],
    truth: &[f64],
    node_types: &[NodeType],
    roles: &BcComponents,
) -> Vec<f64> {
    let n = node_types.len();
    let c = pred.len() / n.max(1);
    let mut out = pred.to_vec();
    for (i, &t) in node_types.iter().enumerate() {
        let row = i * c;
        if velocity_enforced(t) {
            for &k in &roles.velocity {
                out[row + k] = truth[row + k];
            }
        }
        if scalar_enforced(t) {
            for &k in &roles.scalar {
                out[row + k] = truth[row + k];
            }
        }
        for &k in &roles.forcing {
            out[row + k] = truth[row + k];
        }
    }
    out
}

/// Mean squared error over the dynamical components of two `N × C` states.
pub fn state_mse(pred: &[f64], truth: &[f64], schema: &FieldSchema) -> f64 {
    let c = schema.len();
    let idx = schema.dynamical_indices();
    let n = pred.len() / c;
    let mut acc = 0.0;
    for i in 0..n {
        for &k in &idx {
            acc += (pred[i * c + k] - truth[i * c + k]).powi(2);
        }
    }
    acc / (n * idx.len()) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutResult {
    /// States `0..=horizon`, starting from ground truth.
    #[serde(skip)]
    pub states: Vec<Vec<f64>>,
    /// RMSE of each predicted step.
    pub step_rmse: Vec<f64>,
    /// Mean squared error over steps `1..=horizon`.
    pub mse: f64,
    /// First step whose state was non-finite or exceeded the divergence bound.
    pub diverged: Option<usize>,
}

impl RolloutResult {
    /// All-rollout RMSE; infinite for diverged rollouts.
    pub fn rmse(&self) -> f64 {
        if self.diverged.is_some() {
            f64::INFINITY
        } else {
            self.mse.sqrt()
        }
    }
}

/// Anything that advances a trajectory state by one step.
pub trait Surrogate {
    /// Index of the first state a rollout can start from.
    fn first_step(&self) -> usize;

    /// Next state of trajectory `k` from `state` at time `t`, before
    /// boundary enforcement.
    fn advance(
        &self,
        k: usize,
        traj: &Trajectory,
        t: usize,
        state: &[f64],
        previous: Option<&[f64]>,
    ) -> Result<Vec<f64>>;
}

/// A model paired with the contexts of the trajectories it is applied to.
pub struct ModelSurrogate<'a> {
    pub model: &'a Model,
    pub ctxs: &'a [MeshContext],
}

impl Surrogate for ModelSurrogate<'_> {
    fn first_step(&self) -> usize {
        usize::from(self.model.config.history)
    }

    fn advance(
        &self,
        k: usize,
        traj: &Trajectory,
        _t: usize,
        state: &[f64],
        previous: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let model = self.model;
        let features = match (model.config.history, previous) {
            (true, Some(prev)) => NodeFeatures::from_state(
                &traj.mesh,
                &traj.schema,
                state,
                Some((prev, traj.delta_t)),
            ),
            (true, None) => return Err(Error::NoHistory(0)),
            (false, _) => NodeFeatures::from_state(&traj.mesh, &traj.schema, state, None),
        };
        let ctx = self
            .ctxs
            .get(k)
            .ok_or_else(|| Error::Config(format!("no mesh context for trajectory {k}")))?;
        let tape = Tape::new();
        let p = model.params.bind_constant(&tape);
        let out = model.forward(&p, ctx, &features)?.output.value();
        Ok(model.apply_increment(state, &out))
    }
}

/// Returns the stored next state; its rollouts reproduce the data exactly.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruth;

impl Surrogate for GroundTruth {
    fn first_step(&self) -> usize {
        0
    }

    fn advance(
        &self,
        _k: usize,
        traj: &Trajectory,
        t: usize,
        _state: &[f64],
        _previous: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        if t + 1 >= traj.num_steps {
            return Err(Error::Config(format!("no state after t = {t}")));
        }
        Ok(traj.state_f64(t + 1))
    }
}

fn enforced_step<S: Surrogate + ?Sized>(
    s: &S,
    k: usize,
    traj: &Trajectory,
    t: usize,
    state: &[f64],
    previous: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let next = s.advance(k, traj, t, state, previous)?;
    let truth_next = traj.state_f64(t + 1);
    Ok(enforce_bc(
        &next,
        &truth_next,
        traj.mesh.node_types(),
        &BcComponents::from_schema(&traj.schema),
    ))
}

/// One model step from `state` (with `previous` when history is used),
/// followed by boundary enforcement against `truth_next`.
pub fn predict_step(
    model: &Model,
    ctx: &MeshContext,
    traj: &Trajectory,
    state: &[f64],
    previous: Option<&[f64]>,
    truth_next: &[f64],
) -> Result<Vec<f64>> {
    let s = ModelSurrogate {
        model,
        ctxs: std::slice::from_ref(ctx),
    };
    let next = s.advance(0, traj, 0, state, previous)?;
    Ok(enforce_bc(
        &next,
        truth_next,
        traj.mesh.node_types(),
        &BcComponents::from_schema(&traj.schema),
    ))
}

/// Rolls out from ground truth at `start` for `horizon` steps.
pub fn rollout(
    model: &Model,
    ctx: &MeshContext,
    traj: &Trajectory,
    start: usize,
    horizon: usize,
) -> Result<RolloutResult> {
    let s = ModelSurrogate {
        model,
        ctxs: std::slice::from_ref(ctx),
    };
    rollout_with(&s, 0, traj, start, horizon)
}

/// Rollout of trajectory `k` under any surrogate.
pub fn rollout_with<S: Surrogate + ?Sized>(
    s: &S,
    k: usize,
    traj: &Trajectory,
    start: usize,
    horizon: usize,
) -> Result<RolloutResult> {
    let first = s.first_step();
    if start < first {
        return Err(Error::NoHistory(start));
    }
    let states = vec![traj.state_f64(start)];
    let previous = (first == 1).then(|| traj.state_f64(start - 1));
    continue_rollout_with(s, k, traj, start, states, previous, horizon)
}

/// Continues a rollout whose states so far (starting at `start`) are
/// `states`, until it covers `horizon` steps.
pub fn continue_rollout(
    model: &Model,
    ctx: &MeshContext,
    traj: &Trajectory,
    start: usize,
    states: Vec<Vec<f64>>,
    previous: Option<Vec<f64>>,
    horizon: usize,
) -> Result<RolloutResult> {
    let s = ModelSurrogate {
        model,
        ctxs: std::slice::from_ref(ctx),
    };
    continue_rollout_with(&s, 0, traj, start, states, previous, horizon)
}

fn continue_rollout_with<S: Surrogate + ?Sized>(
    s: &S,
    k: usize,
    traj: &Trajectory,
    start: usize,
    mut states: Vec<Vec<f64>>,
    mut previous: Option<Vec<f64>>,
    horizon: usize,
) -> Result<RolloutResult> {
    if start + horizon >= traj.num_steps {
        return Err(Error::Config(format!(
            "horizon {horizon} from t = {start} exceeds a trajectory of {} states",
            traj.num_steps
        )));
    }
    if states.is_empty() {
        return Err(Error::Config("a rollout needs its initial state".into()));
    }
    let bound = DIVERGENCE_FACTOR
        * states[0]
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()))
            .max(f64::MIN_POSITIVE);
    if states.len() > 1 {
        previous = Some(states[states.len() - 2].clone());
    }
    let mut diverged = None;
    while states.len() <= horizon {
        let j = states.len();
        let cur = states.last().expect("nonempty");
        let next = enforced_step(s, k, traj, start + j - 1, cur, previous.as_deref())?;
        if next.iter().any(|x| !x.is_finite() || x.abs() > bound) {
            log::warn!("rollout diverged at step {j}");
            diverged = Some(j);
            break;
        }
        previous = Some(cur.clone());
        states.push(next);
    }
    let step_rmse: Vec<f64> = (1..states.len())
        .map(|j| state_mse(&states[j], &traj.state_f64(start + j), &traj.schema).sqrt())
        .collect();
    let mse = if step_rmse.is_empty() {
        0.0
    } else {
        step_rmse.iter().map(|r| r * r).sum::<f64>() / step_rmse.len() as f64
    };
    Ok(RolloutResult {
        states,
        step_rmse,
        mse,
        diverged,
    })
}

/// Aggregate metrics of one model over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub one_step_rmse: f64,
    pub rollout_rmse: f64,
    /// Per-trajectory all-rollout RMSE.
    pub per_trajectory: Vec<f64>,
    /// Mean over trajectories of the per-step RMSE.
    pub step_rmse: Vec<f64>,
    pub diverged: usize,
}

/// Contexts for every trajectory of a dataset.
pub fn contexts(model: &Model, data: &[Trajectory]) -> Result<Vec<MeshContext>> {
    data.iter().map(|t| model.context(&t.mesh)).collect()
}

/// One-step RMSE from ground-truth inputs, averaged over variables, nodes,
/// steps and then trajectories.
pub fn rmse_1step(model: &Model, ctxs: &[MeshContext], data: &[Trajectory]) -> Result<f64> {
    rmse_1step_with(&ModelSurrogate { model, ctxs }, data)
}

pub fn rmse_1step_with<S: Surrogate + ?Sized>(s: &S, data: &[Trajectory]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config(
            "one-step RMSE needs a nonempty dataset".into(),
        ));
    }
    let first = s.first_step();
    let mut total = 0.0;
    for (k, traj) in data.iter().enumerate() {
        let mut acc = 0.0;
        let steps = first..traj.num_steps - 1;
        let count = steps.len();
        for t in steps {
            let prev = (first == 1).then(|| traj.state_f64(t - 1));
            let next = enforced_step(s, k, traj, t, &traj.state_f64(t), prev.as_deref())?;
            acc += state_mse(&next, &traj.state_f64(t + 1), &traj.schema);
        }
        total += acc / count.max(1) as f64;
    }
    Ok((total / data.len() as f64).sqrt())
}

/// Full-length rollouts of every trajectory.
pub fn evaluate(model: &Model, ctxs: &[MeshContext], data: &[Trajectory]) -> Result<EvalReport> {
    evaluate_with(&ModelSurrogate { model, ctxs }, data, None)
}

/// Rollouts of every trajectory from its first usable state, over
/// `horizon` steps or to the end.
pub fn evaluate_with<S: Surrogate + ?Sized>(
    s: &S,
    data: &[Trajectory],
    horizon: Option<usize>,
) -> Result<EvalReport> {
    let first = s.first_step();
    let mut results = Vec::with_capacity(data.len());
    for (k, traj) in data.iter().enumerate() {
        let full = traj.num_steps - 1 - first;
        results.push(rollout_with(
            s,
            k,
            traj,
            first,
            horizon.map_or(full, |h| h.min(full)),
        )?);
    }
    let diverged = results.iter().filter(|r| r.diverged.is_some()).count();
    let rollout_rmse = if diverged > 0 {
        f64::INFINITY
    } else {
        (results.iter().map(|r| r.mse).sum::<f64>() / results.len() as f64).sqrt()
    };
    let len = results.iter().map(|r| r.step_rmse.len()).max().unwrap_or(0);
    let step_rmse = (0..len)
        .map(|j| {
            let v: Vec<f64> = results
                .iter()
                .filter_map(|r| r.step_rmse.get(j))
                .copied()
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    Ok(EvalReport {
        one_step_rmse: rmse_1step_with(s, data)?,
        rollout_rmse,
        per_trajectory: results.iter().map(RolloutResult::rmse).collect(),
        step_rmse,
        diverged,
    })
}

/// Lines `step,rmse` of a per-step series with shortest round-trip floats.
pub fn series_csv(header: &str, values: &[f64]) -> String {
    let mut s = format!("{header}\n");
    for (k, v) in values.iter().enumerate() {
        s.push_str(&format!("{},{}\n", k + 1, v));
    }
    s
}

/// All-rollout RMSE of holding the initial state fixed (with boundary
/// enforcement), the prediction of a model whose increments are zero.
pub fn persistence_rmse(data: &[Trajectory], first: usize) -> f64 {
    let mut total = 0.0;
    for traj in data {
        let s0 = traj.state_f64(first);
        let roles = BcComponents::from_schema(&traj.schema);
        let steps = traj.num_steps - 1 - first;
        let mut acc = 0.0;
        for k in 1..=steps {
            let truth = traj.state_f64(first + k);
            let pred = enforce_bc(&s0, &truth, traj.mesh.node_types(), &roles);
            acc += state_mse(&pred, &truth, &traj.schema);
        }
        total += acc / steps as f64;
    }
    (total / data.len() as f64).sqrt()
}

#[cfg(test)]
mod tests;
