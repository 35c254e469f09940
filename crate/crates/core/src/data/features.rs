use std::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FieldSchema, Trajectory};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mesh::{MeshGraph, NodeType};
use crate::rng::stream;

/// Column ranges of a node feature matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub node_type: Range<usize>,
    /// Dynamical state components, in schema order.
    pub dynamical: Range<usize>,
    /// Non-dynamical forcing components such as the inflow magnitude.
    pub forcing: Range<usize>,
    pub history: Option<Range<usize>>,
}

impl FeatureLayout {
    pub fn new(schema: &FieldSchema, history: bool) -> Self {
        let k = schema.dynamical_indices().len();
        let f = schema.forcing_indices().len();
        let d0 = NodeType::COUNT;
        Self {
            node_type: 0..d0,
            dynamical: d0..d0 + k,
            forcing: d0 + k..d0 + k + f,
            history: history.then(|| d0 + k + f..d0 + 2 * k + f),
        }
    }

    pub fn width(&self) -> usize {
        self.history.as_ref().map_or(self.forcing.end, |h| h.end)
    }
}

/// Per-node input attributes in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatures {
    /// `N × p` values.
    pub values: Tensor,
    pub layout: FeatureLayout,
}

impl NodeFeatures {
    /// Assembles features from an `N × C` state and, when history is
    /// requested, the previous state.
    pub fn from_state(
        mesh: &MeshGraph,
        schema: &FieldSchema,
        state: &[f64],
        previous: Option<(&[f64], f64)>,
    ) -> Self {
        let layout = FeatureLayout::new(schema, previous.is_some());
        let n = mesh.num_nodes();
        let c = schema.len();
        let dyn_idx = schema.dynamical_indices();
        let forcing_idx = schema.forcing_indices();
        let mut values = Tensor::zeros(n, layout.width());
        for i in 0..n {
            let row = values.row_mut(i);
            row[mesh.node_types()[i].index()] = 1.0;
            for (k, &ci) in dyn_idx.iter().enumerate() {
                row[layout.dynamical.start + k] = state[i * c + ci];
            }
            for (k, &ci) in forcing_idx.iter().enumerate() {
                row[layout.forcing.start + k] = state[i * c + ci];
            }
            if let (Some(h), Some((prev, dt))) = (&layout.history, previous) {
                for (k, &ci) in dyn_idx.iter().enumerate() {
                    row[h.start + k] = (state[i * c + ci] - prev[i * c + ci]) / dt;
                }
            }
        }
        Self { values, layout }
    }

    pub fn num_nodes(&self) -> usize {
        self.values.rows()
    }

    /// `N × k` dynamical block.
    pub fn dynamical(&self) -> Tensor {
        self.values
            .slice_cols(self.layout.dynamical.start, self.layout.dynamical.end)
    }
}

/// Features of step `t` of a trajectory.
pub fn node_features(traj: &Trajectory, t: usize, history: bool) -> Result<NodeFeatures> {
    let state = traj.state_f64(t);
    if history {
        if t == 0 {
            return Err(Error::NoHistory(t));
        }
        let prev = traj.state_f64(t - 1);
        Ok(NodeFeatures::from_state(
            &traj.mesh,
            &traj.schema,
            &state,
            Some((&prev, traj.delta_t)),
        ))
    } else {
        Ok(NodeFeatures::from_state(
            &traj.mesh,
            &traj.schema,
            &state,
            None,
        ))
    }
}

/// `(u_t − u_{t−1}) / Δt` per dynamical component, `N × k`.
pub fn history_feature(traj: &Trajectory, t: usize) -> Result<Tensor> {
    if t == 0 || t >= traj.num_steps {
        return Err(Error::NoHistory(t));
    }
    let idx = traj.schema.dynamical_indices();
    let n = traj.num_nodes();
    let mut out = Tensor::zeros(n, idx.len());
    for i in 0..n {
        for (k, &c) in idx.iter().enumerate() {
            out.set(
                i,
                k,
                (traj.value(t, i, c) - traj.value(t - 1, i, c)) / traj.delta_t,
            );
        }
    }
    Ok(out)
}

/// Standard deviations of the Gaussian input noise per dynamical component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: Vec<f64>,
}

impl NoiseSpec {
    pub fn uniform(sigma: f64, components: usize) -> Self {
        Self {
            sigma: vec![sigma; components],
        }
    }
}

/// Adds `N(0, σ_k)` to the dynamical columns only.
pub fn add_training_noise(
    features: &NodeFeatures,
    spec: &NoiseSpec,
    seed: u64,
) -> Result<NodeFeatures> {
    let cols = features.layout.dynamical.clone();
    if spec.sigma.len() != cols.len() {
        return Err(Error::Config(format!(
            "noise has {} deviations for {} dynamical components",
            spec.sigma.len(),
            cols.len()
        )));
    }
    if let Some(s) = spec.sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Config(format!("noise deviation {s} is negative")));
    }
    let mut out = features.clone();
    if spec.sigma.iter().all(|&s| s == 0.0) {
        return Ok(out);
    }
    let mut rng = stream(seed, &[]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..out.num_nodes() {
        let row = out.values.row_mut(i);
        for (k, c) in cols.clone().enumerate() {
            row[c] += spec.sigma[k] * normal.sample(&mut rng);
        }
    }
    Ok(out)
}
