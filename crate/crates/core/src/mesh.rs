//! Unstructured mesh graphs, adjacency, neighborhoods and geometric context.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Categorical boundary label of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum NodeType {
    Normal = 0,
    Inflow = 1,
    Outflow = 2,
    Wall = 3,
    Obstacle = 4,
}

impl NodeType {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Some(match i {
            0 => NodeType::Normal,
            1 => NodeType::Inflow,
            2 => NodeType::Outflow,
            3 => NodeType::Wall,
            4 => NodeType::Obstacle,
            _ => return None,
        })
    }
}

/// Undirected graph over mesh vertices.
///
/// Edges are stored once per direction, sorted by `(sender, receiver)`.
/// Triangles are kept when the graph comes from a triangulation; they are
/// only used by the reference solver.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshGraph {
    dim: usize,
    positions: Vec<f64>,
    edges: Vec<(usize, usize)>,
    node_type: Vec<NodeType>,
    triangles: Vec<[usize; 3]>,
}

impl MeshGraph {
    /// Builds a graph from undirected pairs; both directions are inserted
    /// and duplicates removed.
    pub fn from_pairs(
        dim: usize,
        positions: Vec<f64>,
        pairs: &[(usize, usize)],
        node_type: Vec<NodeType>,
    ) -> Result<Self> {
        let mut directed = Vec::with_capacity(pairs.len() * 2);
        for &(a, b) in pairs {
            directed.push((a, b));
            directed.push((b, a));
        }
        Self::new(dim, positions, directed, node_type)
    }

    /// Validates and stores a directed edge list that must already be
    /// symmetric as a set.
    pub fn new(
        dim: usize,
        positions: Vec<f64>,
        mut edges: Vec<(usize, usize)>,
        node_type: Vec<NodeType>,
    ) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Mesh(format!("dimension must be 2 or 3, got {dim}")));
        }
        if positions.len() % dim != 0 {
            return Err(Error::Mesh(format!(
                "{} coordinates do not form {dim}-d points",
                positions.len()
            )));
        }
        let n = positions.len() / dim;
        if node_type.len() != n {
            return Err(Error::Mesh(format!(
                "{} node labels for {n} nodes",
                node_type.len()
            )));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::Mesh("non-finite node position".into()));
        }
        for &(s, r) in &edges {
            for index in [s, r] {
                if index >= n {
                    return Err(Error::NodeIndex {
                        index,
                        num_nodes: n,
                    });
                }
            }
            if s == r {
                return Err(Error::Mesh(format!("self-loop at node {s}")));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        for &(s, r) in &edges {
            if edges.binary_search(&(r, s)).is_err() {
                return Err(Error::Mesh(format!(
                    "edge ({s}, {r}) has no reverse ({r}, {s})"
                )));
            }
        }
        Ok(Self {
            dim,
            positions,
            edges,
            node_type,
            triangles: Vec::new(),
        })
    }

    pub(crate) fn with_triangles(mut self, triangles: Vec<[usize; 3]>) -> Self {
        self.triangles = triangles;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_nodes(&self) -> usize {
        self.node_type.len()
    }

    /// Number of directed edges (twice the undirected count).
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Each undirected edge once, as `(min, max)`.
    pub fn undirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied().filter(|(s, r)| s < r)
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_type
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.position(i)
            .iter()
            .zip(self.position(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Sorted, duplicate-free neighbor list of node `i`.
    pub fn neighborhood(&self, i: usize) -> Result<Vec<usize>> {
        if i >= self.num_nodes() {
            return Err(Error::NodeIndex {
                index: i,
                num_nodes: self.num_nodes(),
            });
        }
        let start = self.edges.partition_point(|&(s, _)| s < i);
        let end = self.edges.partition_point(|&(s, _)| s <= i);
        Ok(self.edges[start..end].iter().map(|&(_, r)| r).collect())
    }

    /// Nodes labelled [`NodeType::Normal`].
    pub fn internal_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&i| self.node_type[i] == NodeType::Normal)
            .collect()
    }

    /// Adds `count` distinct random non-adjacent pairs in both directions.
    pub fn add_jumpers(&self, count: usize, seed: u64) -> Result<MeshGraph> {
        if count == 0 {
            return Ok(self.clone());
        }
        let n = self.num_nodes();
        let total_pairs = n * n.saturating_sub(1) / 2;
        let available = total_pairs - self.edges.len() / 2;
        if count > available {
            return Err(Error::JumperBudget {
                requested: count,
                available,
            });
        }
        let adjacency = build_adjacency(self)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = BTreeSet::new();
        if count * 4 >= available {
            let candidates: Vec<(usize, usize)> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|&(i, j)| !adjacency.contains(i, j))
                .collect();
            for k in index::sample(&mut rng, candidates.len(), count) {
                chosen.insert(candidates[k]);
            }
        } else {
            while chosen.len() < count {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                if i == j || adjacency.contains(i, j) {
                    continue;
                }
                chosen.insert((i.min(j), i.max(j)));
            }
        }
        let mut edges = self.edges.clone();
        for (i, j) in chosen {
            edges.push((i, j));
            edges.push((j, i));
        }
        Ok(Self::new(
            self.dim,
            self.positions.clone(),
            edges,
            self.node_type.clone(),
        )?
        .with_triangles(self.triangles.clone()))
    }

    /// Centered coordinates and global mesh size.
    pub fn geometry(&self) -> GeometricContext {
        let n = self.num_nodes().max(1);
        let dim = self.dim;
        let mut mean = vec![0.0; dim];
        for i in 0..self.num_nodes() {
            for (m, x) in mean.iter_mut().zip(self.position(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        // Second pass removes the rounding residue of the first mean.
        let mut residue = vec![0.0; dim];
        for i in 0..self.num_nodes() {
            for ((r, x), m) in residue.iter_mut().zip(self.position(i)).zip(&mean) {
                *r += x - m;
            }
        }
        for (m, r) in mean.iter_mut().zip(&residue) {
            *m += r / n as f64;
        }
        let centered = self
            .positions
            .iter()
            .enumerate()
            .map(|(k, x)| x - mean[k % dim])
            .collect();
        let mesh_size_h = self
            .undirected_edges()
            .map(|(i, j)| self.distance(i, j))
            .fold(0.0, f64::max);
        let mut diameter = 0.0f64;
        for i in 0..self.num_nodes() {
            for j in i + 1..self.num_nodes() {
                diameter = diameter.max(self.distance(i, j));
            }
        }
        GeometricContext {
            dim,
            centered_positions: centered,
            mesh_size_h,
            mean_position: mean,
            diameter,
        }
    }
}

/// Translation-free geometric quantities of a mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricContext {
    pub dim: usize,
    /// `N × dim` row-major positions minus their mean.
    pub centered_positions: Vec<f64>,
    /// Maximum edge length.
    pub mesh_size_h: f64,
    pub mean_position: Vec<f64>,
    /// Largest pairwise node distance.
    pub diameter: f64,
}

impl GeometricContext {
    pub fn centered(&self, i: usize) -> &[f64] {
        &self.centered_positions[i * self.dim..(i + 1) * self.dim]
    }
}

/// Compressed sparse rows of a symmetric boolean adjacency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Adjacency {
    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|i| self.degree(i)).collect()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Dense `N × N` 0/1 matrix, row-major.
    pub fn to_dense(&self) -> Vec<u8> {
        let n = self.num_nodes();
        let mut out = vec![0u8; n * n];
        for i in 0..n {
            for &j in self.neighbors(i) {
                out[i * n + j] = 1;
            }
        }
        out
    }
}

/// Symmetric adjacency structure of a mesh, neighbors in ascending order.
pub fn build_adjacency(mesh: &MeshGraph) -> Result<Adjacency> {
    let n = mesh.num_nodes();
    let mut offsets = vec![0usize; n + 1];
    for &(s, r) in mesh.edges() {
        if s >= n || r >= n {
            return Err(Error::NodeIndex {
                index: s.max(r),
                num_nodes: n,
            });
        }
        offsets[s + 1] += 1;
    }
    for i in 0..n {
        offsets[i + 1] += offsets[i];
    }
    // Edges are sorted by sender then receiver, so receivers fill in order.
    let neighbors = mesh.edges().iter().map(|&(_, r)| r).collect();
    Ok(Adjacency { offsets, neighbors })
}
