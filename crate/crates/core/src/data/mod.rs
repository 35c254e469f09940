//! Synthetic advection–diffusion trajectories on unstructured triangle meshes.

mod features;
mod io;
mod meshgen;
mod solver;

use serde::{Deserialize, Serialize};

pub use features::{
    add_training_noise, history_feature, node_features, FeatureLayout, NodeFeatures, NoiseSpec,
};
pub use io::{decode_trajectory, encode_trajectory, read_trajectory, write_trajectory};
pub use meshgen::generate_mesh;
pub use solver::{
    simulate, simulate_f64, stable_time_step, BoundaryMode, InitialField, PhysicsParams, Stepper,
};

use crate::error::{Error, Result};
use crate::mesh::MeshGraph;
use crate::rng::derive_seed;

/// Named components of a state vector and which of them evolve in time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub names: Vec<String>,
    /// Dynamical components are predicted by the model and receive noise.
    pub dynamical: Vec<bool>,
}

impl FieldSchema {
    /// `vx, vy, s` dynamical plus the non-dynamical inflow magnitude.
    pub fn advection_diffusion() -> Self {
        Self {
            names: ["vx", "vy", "s", "inflow"].map(String::from).to_vec(),
            dynamical: vec![true, true, true, false],
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dynamical_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.dynamical[c]).collect()
    }

    pub fn forcing_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| !self.dynamical[c]).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Time-indexed node states on a fixed mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub mesh: MeshGraph,
    /// `T × N × C` row-major values.
    pub states: Vec<f32>,
    pub num_steps: usize,
    pub delta_t: f64,
    pub schema: FieldSchema,
}

impl Trajectory {
    pub fn new(
        mesh: MeshGraph,
        states: Vec<f32>,
        num_steps: usize,
        delta_t: f64,
        schema: FieldSchema,
    ) -> Result<Self> {
        let expected = num_steps * mesh.num_nodes() * schema.len();
        if num_steps < 2 {
            return Err(Error::FileSchema(format!(
                "trajectory needs at least 2 states, got {num_steps}"
            )));
        }
        if schema.dynamical.len() != schema.names.len() {
            return Err(Error::FileSchema(
                "dynamical flags do not match component names".into(),
            ));
        }
        if states.len() != expected {
            return Err(Error::FileSchema(format!(
                "{} state values for {num_steps} steps x {} nodes x {} components",
                states.len(),
                mesh.num_nodes(),
                schema.len()
            )));
        }
        if states.iter().any(|x| !x.is_finite()) {
            return Err(Error::FilePayload("non-finite state value".into()));
        }
        Ok(Self {
            mesh,
            states,
            num_steps,
            delta_t,
            schema,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.mesh.num_nodes()
    }

    pub fn num_components(&self) -> usize {
        self.schema.len()
    }

    /// `N × C` slice of step `t`.
    pub fn state(&self, t: usize) -> &[f32] {
        let w = self.num_nodes() * self.num_components();
        &self.states[t * w..(t + 1) * w]
    }

    pub fn state_f64(&self, t: usize) -> Vec<f64> {
        self.state(t).iter().map(|&x| x as f64).collect()
    }

    pub fn value(&self, t: usize, node: usize, comp: usize) -> f64 {
        self.state(t)[node * self.num_components() + comp] as f64
    }
}

/// Dataset generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub nodes: usize,
    pub steps: usize,
    pub delta_t: f64,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    pub seed: u64,
    pub physics: PhysicsParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            nodes: 1000,
            steps: 100,
            delta_t: 0.01,
            train_trajectories: 50,
            test_trajectories: 10,
            seed: 0,
            physics: PhysicsParams::default(),
        }
    }
}

/// Disjoint train and test trajectories.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub seed: u64,
}

/// Generates trajectory `index` of a dataset: its own mesh and initial state.
pub fn generate_trajectory(cfg: &DatasetConfig, index: u64) -> Result<Trajectory> {
    let mesh = generate_mesh(cfg.nodes, derive_seed(cfg.seed, &[index, 0]))?;
    simulate(
        &mesh,
        cfg.steps,
        cfg.delta_t,
        &cfg.physics,
        derive_seed(cfg.seed, &[index, 1]),
    )
}

/// Generates the train split followed by the test split.
pub fn generate_split(cfg: &DatasetConfig) -> Result<DatasetSplit> {
    let total = cfg.train_trajectories + cfg.test_trajectories;
    let mut all = (0..total as u64)
        .map(|k| generate_trajectory(cfg, k))
        .collect::<Result<Vec<_>>>()?;
    let test = all.split_off(cfg.train_trajectories);
    Ok(DatasetSplit {
        train: all,
        test,
        seed: cfg.seed,
    })
}
