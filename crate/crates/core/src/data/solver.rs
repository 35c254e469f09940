use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FieldSchema, Trajectory};
use crate::error::{Error, Result};
use crate::mesh::{MeshGraph, NodeType};
use crate::rng::stream;

/// Whether boundary values are imposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Inflow profile on `Inflow` nodes, no-slip velocity on `Wall` nodes.
    Driven,
    /// No imposed values; the discrete operator alone evolves every node.
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialField {
    /// Sum of random Gaussian bumps per component.
    Random,
    /// The same `(vx, vy, s)` at every node.
    Uniform([f64; 3]),
}

/// Background transport and forcing of the synthetic flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsParams {
    /// Constant advection velocity `a`.
    pub velocity: [f64; 2],
    /// Diffusivity `κ`.
    pub diffusivity: f64,
    pub boundary: BoundaryMode,
    pub initial: InitialField,
    /// Mean centerline inflow speed.
    pub inflow_speed: f64,
    /// Relative amplitude of the periodic inflow modulation.
    pub inflow_modulation: f64,
    /// Modulation frequency in Hz.
    pub inflow_frequency: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            velocity: [0.3, 0.08],
            diffusivity: 0.001,
            boundary: BoundaryMode::Driven,
            initial: InitialField::Random,
            inflow_speed: 1.0,
            inflow_modulation: 0.3,
            inflow_frequency: 1.0,
        }
    }
}

/// Explicit upwind finite-volume update on a triangle mesh.
///
/// With lumped masses `m_i` and clipped cotangent weights `ω_ij`, each
/// dynamical component evolves as
/// `du_i/dt = (1/m_i) Σ_j ω_ij [κ(u_j − u_i) − (a·d_ij)⁺ u_i + (−a·d_ij)⁺ u_j]`.
pub struct Stepper {
    sender_offsets: Vec<usize>,
    receivers: Vec<usize>,
    coef: Vec<f64>,
    diag: Vec<f64>,
    mass: Vec<f64>,
}

impl Stepper {
    pub fn new(mesh: &MeshGraph, params: &PhysicsParams) -> Result<Self> {
        if mesh.dim() != 2 || mesh.triangles().is_empty() {
            return Err(Error::Mesh(
                "the solver needs a 2-d triangulated mesh".into(),
            ));
        }
        let n = mesh.num_nodes();
        let edges = mesh.edges();
        let mut mass = vec![0.0; n];
        let mut omega = vec![0.0; edges.len()];
        for &[a, b, c] in mesh.triangles() {
            let (pa, pb, pc) = (mesh.position(a), mesh.position(b), mesh.position(c));
            let area =
                0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1])).abs();
            for v in [a, b, c] {
                mass[v] += area / 3.0;
            }
            for (i, j, k) in [(a, b, c), (b, c, a), (c, a, b)] {
                let (pi, pj, pk) = (mesh.position(i), mesh.position(j), mesh.position(k));
                let u = [pi[0] - pk[0], pi[1] - pk[1]];
                let v = [pj[0] - pk[0], pj[1] - pk[1]];
                let cot = (u[0] * v[0] + u[1] * v[1]) / (u[0] * v[1] - u[1] * v[0]).abs();
                for e in [(i, j), (j, i)] {
                    let k = edges.binary_search(&e).map_err(|_| {
                        Error::Mesh(format!("triangle edge {e:?} missing from graph"))
                    })?;
                    omega[k] += 0.5 * cot;
                }
            }
        }
        if let Some(i) = mass.iter().position(|&m| m <= 0.0) {
            return Err(Error::Mesh(format!("node {i} has no adjacent triangle")));
        }
        let kappa = params.diffusivity;
        let a = params.velocity;
        let mut sender_offsets = vec![0usize; n + 1];
        let mut receivers = Vec::with_capacity(edges.len());
        let mut coef = Vec::with_capacity(edges.len());
        let mut diag = vec![0.0; n];
        for (k, &(i, j)) in edges.iter().enumerate() {
            let (pi, pj) = (mesh.position(i), mesh.position(j));
            let ad = a[0] * (pj[0] - pi[0]) + a[1] * (pj[1] - pi[1]);
            let w = omega[k].max(0.0);
            diag[i] -= w * (kappa + ad.max(0.0)) / mass[i];
            sender_offsets[i + 1] += 1;
            receivers.push(j);
            coef.push(w * (kappa + (-ad).max(0.0)) / mass[i]);
        }
        for i in 0..n {
            sender_offsets[i + 1] += sender_offsets[i];
        }
        Ok(Self {
            sender_offsets,
            receivers,
            coef,
            diag,
            mass,
        })
    }

    /// Largest step keeping every update a nonnegative combination.
    pub fn stable_dt(&self) -> f64 {
        let worst = self.diag.iter().fold(0.0f64, |m, d| m.max(-d));
        if worst == 0.0 {
            f64::INFINITY
        } else {
            1.0 / worst
        }
    }

    pub fn lumped_mass(&self) -> &[f64] {
        &self.mass
    }

    /// Advances `components` leading columns of an `N × stride` state.
    pub fn step(&self, state: &[f64], stride: usize, components: usize, dt: f64) -> Vec<f64> {
        let mut out = state.to_vec();
        for i in 0..self.diag.len() {
            for c in 0..components {
                let mut rate = self.diag[i] * state[i * stride + c];
                for k in self.sender_offsets[i]..self.sender_offsets[i + 1] {
                    rate += self.coef[k] * state[self.receivers[k] * stride + c];
                }
                out[i * stride + c] = state[i * stride + c] + dt * rate;
            }
        }
        out
    }
}

/// Stable explicit step for a mesh under the given physics.
pub fn stable_time_step(mesh: &MeshGraph, params: &PhysicsParams) -> Result<f64> {
    Ok(Stepper::new(mesh, params)?.stable_dt())
}

struct Forcing {
    phase_u: f64,
    phase_s: f64,
}

impl Forcing {
    fn inflow_speed(&self, p: &PhysicsParams, t: f64) -> f64 {
        p.inflow_speed
            * (1.0 + p.inflow_modulation * (2.0 * PI * p.inflow_frequency * t + self.phase_u).sin())
    }

    fn apply(&self, p: &PhysicsParams, mesh: &MeshGraph, state: &mut [f64], t: f64) {
        let u = self.inflow_speed(p, t);
        for i in 0..mesh.num_nodes() {
            let row = &mut state[i * 4..(i + 1) * 4];
            row[3] = u;
            if p.boundary == BoundaryMode::Free {
                continue;
            }
            let y = mesh.position(i)[1];
            match mesh.node_types()[i] {
                NodeType::Inflow => {
                    row[0] = u * 4.0 * y * (1.0 - y);
                    row[1] = 0.0;
                    row[2] = (PI * y).sin()
                        * (1.0 + 0.5 * (2.0 * PI * p.inflow_frequency * t + self.phase_s).sin());
                }
                NodeType::Wall | NodeType::Obstacle => {
                    row[0] = 0.0;
                    row[1] = 0.0;
                }
                NodeType::Normal | NodeType::Outflow => {}
            }
        }
    }
}

fn initial_state(mesh: &MeshGraph, p: &PhysicsParams, rng: &mut impl Rng) -> Vec<f64> {
    let n = mesh.num_nodes();
    let mut state = vec![0.0; n * 4];
    match p.initial {
        InitialField::Uniform(v) => {
            for i in 0..n {
                state[i * 4..i * 4 + 3].copy_from_slice(&v);
            }
        }
        InitialField::Random => {
            let scale = [0.3, 0.3, 1.0];
            for (c, s) in scale.iter().enumerate() {
                for _ in 0..3 {
                    let amp = s * rng.random_range(-1.0..1.0);
                    let cx = rng.random_range(0.0..1.0);
                    let cy = rng.random_range(0.0..1.0);
                    let w: f64 = rng.random_range(0.1..0.25);
                    for i in 0..n {
                        let q = mesh.position(i);
                        let r2 = (q[0] - cx).powi(2) + (q[1] - cy).powi(2);
                        state[i * 4 + c] += amp * (-r2 / (2.0 * w * w)).exp();
                    }
                }
            }
            for i in 0..n {
                state[i * 4] += 0.5 * p.inflow_speed;
            }
        }
    }
    state
}

/// Runs the reference solver in double precision and returns `steps + 1`
/// states of `N × 4` values `(vx, vy, s, inflow)`.
pub fn simulate_f64(
    mesh: &MeshGraph,
    steps: usize,
    delta_t: f64,
    params: &PhysicsParams,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let stepper = Stepper::new(mesh, params)?;
    let limit = stepper.stable_dt();
    if !(delta_t > 0.0) || delta_t > limit {
        return Err(Error::Cfl {
            delta_t,
            suggested: 0.9 * limit.min(f64::MAX),
        });
    }
    let mut rng = stream(seed, &[]);
    let forcing = Forcing {
        phase_u: rng.random_range(0.0..2.0 * PI),
        phase_s: rng.random_range(0.0..2.0 * PI),
    };
    let mut state = initial_state(mesh, params, &mut rng);
    forcing.apply(params, mesh, &mut state, 0.0);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(state.clone());
    for n in 1..=steps {
        state = stepper.step(&state, 4, 3, delta_t);
        forcing.apply(params, mesh, &mut state, n as f64 * delta_t);
        out.push(state.clone());
    }
    Ok(out)
}

/// Simulates `steps` updates and stores the `steps + 1` states in `f32`.
pub fn simulate(
    mesh: &MeshGraph,
    steps: usize,
    delta_t: f64,
    params: &PhysicsParams,
    seed: u64,
) -> Result<Trajectory> {
    let states = simulate_f64(mesh, steps, delta_t, params, seed)?;
    let flat = states
        .iter()
        .flat_map(|s| s.iter().map(|&x| x as f32))
        .collect();
    Trajectory::new(
        mesh.clone(),
        flat,
        steps + 1,
        delta_t,
        FieldSchema::advection_diffusion(),
    )
}
