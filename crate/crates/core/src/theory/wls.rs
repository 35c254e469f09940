//! Weighted least-squares gradient reconstruction on 1-hop stencils.

use std::rc::Rc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::MeshGraph;

/// Relative tolerance on the smallest moment eigenvalue, in units of `h²`.
pub const DEGENERACY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WlsWeighting {
    /// `w_ij = 1 / |N(i)|`.
    #[default]
    Uniform,
    /// `w_ij ∝ 1 / |x_j − x_i|`, normalized to unit sum.
    InverseDistance,
}

/// Offsets `B_i` and weights `W_i` of one stencil.
#[derive(Clone, Debug, PartialEq)]
pub struct WlsStencil {
    /// `|N(i)| × dim`, rows `x_j − x_i`.
    pub offsets: DMatrix<f64>,
    /// Nonnegative, summing to one.
    pub weights: Vec<f64>,
    /// Length scale for the spectral bounds.
    pub h: f64,
    /// Node index for diagnostics.
    pub node: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssumptionCheck {
    pub c0_hat: f64,
    pub c1_hat: f64,
    pub satisfied: bool,
}

impl WlsStencil {
    /// Stencil from explicit offsets; `h` defaults to the largest offset length.
    pub fn new(offsets: &[Vec<f64>], weighting: WlsWeighting, h: Option<f64>) -> Result<Self> {
        let dim = offsets.first().map_or(0, Vec::len);
        if offsets.is_empty() || dim == 0 || offsets.iter().any(|o| o.len() != dim) {
            return Err(Error::shape(
                "wls stencil",
                "offsets must be a nonempty list of equal-length vectors",
            ));
        }
        let lengths: Vec<f64> = offsets
            .iter()
            .map(|o| o.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let raw: Vec<f64> = match weighting {
            WlsWeighting::Uniform => vec![1.0; offsets.len()],
            WlsWeighting::InverseDistance => {
                if lengths.iter().any(|&l| l == 0.0) {
                    return Err(Error::Mesh(
                        "coincident stencil point under inverse-distance weights".into(),
                    ));
                }
                lengths.iter().map(|l| 1.0 / l).collect()
            }
        };
        let total: f64 = raw.iter().sum();
        let h = h.unwrap_or_else(|| lengths.iter().copied().fold(0.0, f64::max));
        Ok(Self {
            offsets: DMatrix::from_fn(offsets.len(), dim, |r, c| offsets[r][c]),
            weights: raw.iter().map(|w| w / total).collect(),
            h,
            node: 0,
        })
    }

    /// Stencil of node `i` over its mesh neighbors.
    pub fn from_mesh(
        mesh: &MeshGraph,
        i: usize,
        weighting: WlsWeighting,
        h: Option<f64>,
    ) -> Result<Self> {
        let nbrs = mesh.neighborhood(i)?;
        if nbrs.is_empty() {
            return Err(Error::DegenerateStencil {
                node: i,
                min_eigenvalue: 0.0,
            });
        }
        let xi = mesh.position(i);
        let offsets: Vec<Vec<f64>> = nbrs
            .iter()
            .map(|&j| {
                mesh.position(j)
                    .iter()
                    .zip(xi)
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect();
        let mut s = Self::new(&offsets, weighting, h)?;
        s.node = i;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.offsets.ncols()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `B_iᵀ W_i B_i`.
    pub fn moment(&self) -> DMatrix<f64> {
        let w = DMatrix::from_diagonal(&DVector::from_column_slice(&self.weights));
        self.offsets.transpose() * w * &self.offsets
    }

    /// Smallest and largest moment eigenvalues.
    pub fn eigen_bounds(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.moment()).eigenvalues;
        (eig.min(), eig.max())
    }

    /// Spectral bounds divided by `h²`.
    pub fn check_assumption(&self) -> AssumptionCheck {
        let (lo, hi) = self.eigen_bounds();
        let h2 = self.h * self.h;
        AssumptionCheck {
            c0_hat: lo / h2,
            c1_hat: hi / h2,
            satisfied: lo > DEGENERACY_TOL * h2,
        }
    }

    /// `(BᵀWB)⁻¹ BᵀW`, shape `dim × |N(i)|`.
    pub fn coefficients(&self) -> Result<DMatrix<f64>> {
        let (lo, _) = self.eigen_bounds();
        if !(lo > DEGENERACY_TOL * self.h * self.h) {
            return Err(Error::DegenerateStencil {
                node: self.node,
                min_eigenvalue: lo,
            });
        }
        let inv = self
            .moment()
            .cholesky()
            .ok_or(Error::DegenerateStencil {
                node: self.node,
                min_eigenvalue: lo,
            })?
            .inverse();
        let mut bw = self.offsets.transpose();
        for (c, w) in self.weights.iter().enumerate() {
            bw.column_mut(c).scale_mut(*w);
        }
        Ok(inv * bw)
    }

    /// Gradient from the differences `d_i(v) = (v_j − v_i)_j`.
    pub fn gradient(&self, differences: &[f64]) -> Result<Vec<f64>> {
        if differences.len() != self.len() {
            return Err(Error::shape(
                "wls gradient",
                format!(
                    "{} differences for {} neighbors",
                    differences.len(),
                    self.len()
                ),
            ));
        }
        let g = self.coefficients()? * DVector::from_column_slice(differences);
        Ok(g.iter().copied().collect())
    }
}

/// Gradient of a field sampled on `stencil` around a center value.
pub fn wls_gradient(center: f64, neighbors: &[f64], stencil: &WlsStencil) -> Result<Vec<f64>> {
    let d: Vec<f64> = neighbors.iter().map(|v| v - center).collect();
    stencil.gradient(&d)
}

/// Mesh-wide WLS operator as per-edge coefficients, `∇_h v(x_i) = Σ_j c_ij (v_j − v_i)`.
///
/// Degenerate stencils get zero coefficients and are excluded from every
/// node average.
#[derive(Clone, Debug)]
pub struct WlsOperator {
    pub num_nodes: usize,
    pub dim: usize,
    /// Edge `e` reads node `senders[e]` into node `receivers[e]`.
    pub senders: Rc<[usize]>,
    pub receivers: Rc<[usize]>,
    /// `E × dim` coefficients.
    pub coefficients: Tensor,
    /// `N × 1`, one for valid stencils.
    pub valid: Tensor,
    pub degenerate: Vec<usize>,
}

impl WlsOperator {
    pub fn new(mesh: &MeshGraph, weighting: WlsWeighting) -> Result<Self> {
        let n = mesh.num_nodes();
        let dim = mesh.dim();
        let h = mesh.geometry().mesh_size_h;
        let mut senders = Vec::with_capacity(mesh.num_edges());
        let mut receivers = Vec::with_capacity(mesh.num_edges());
        let mut coeff = Vec::with_capacity(mesh.num_edges() * dim);
        let mut valid = Tensor::zeros(n, 1);
        let mut degenerate = Vec::new();
        for i in 0..n {
            let nbrs = mesh.neighborhood(i)?;
            let c = if nbrs.is_empty() {
                Err(Error::DegenerateStencil {
                    node: i,
                    min_eigenvalue: 0.0,
                })
            } else {
                WlsStencil::from_mesh(mesh, i, weighting, Some(h)).and_then(|s| s.coefficients())
            };
            match c {
                Ok(c) => {
                    valid.set(i, 0, 1.0);
                    for (k, &j) in nbrs.iter().enumerate() {
                        senders.push(j);
                        receivers.push(i);
                        coeff.extend((0..dim).map(|a| c[(a, k)]));
                    }
                }
                Err(Error::DegenerateStencil { .. }) => degenerate.push(i),
                Err(e) => return Err(e),
            }
        }
        if !degenerate.is_empty() {
            log::warn!("{} degenerate WLS stencils skipped", degenerate.len());
        }
        let e = senders.len();
        Ok(Self {
            num_nodes: n,
            dim,
            senders: senders.into(),
            receivers: receivers.into(),
            coefficients: Tensor::from_vec(e, dim, coeff)?,
            valid,
            degenerate,
        })
    }

    pub fn num_valid(&self) -> usize {
        self.num_nodes - self.degenerate.len()
    }

    /// Per-axis gradients of an `N × c` field; zero rows at degenerate nodes.
    pub fn gradient(&self, field: &Tensor) -> Result<Vec<Tensor>> {
        if field.rows() != self.num_nodes {
            return Err(Error::shape(
                "wls operator",
                format!("{} rows for {} nodes", field.rows(), self.num_nodes),
            ));
        }
        let c = field.cols();
        let mut out = vec![Tensor::zeros(self.num_nodes, c); self.dim];
        for e in 0..self.senders.len() {
            let (s, r) = (self.senders[e], self.receivers[e]);
            for (a, g) in out.iter_mut().enumerate() {
                let w = self.coefficients.get(e, a);
                for k in 0..c {
                    let v = g.get(r, k) + w * (field.get(s, k) - field.get(r, k));
                    g.set(r, k, v);
                }
            }
        }
        Ok(out)
    }

    /// Differentiable version of [`WlsOperator::gradient`].
    pub fn gradient_var<'t>(&self, field: Var<'t>) -> Result<Vec<Var<'t>>> {
        if field.rows() != self.num_nodes {
            return Err(Error::shape(
                "wls operator",
                format!("{} rows for {} nodes", field.rows(), self.num_nodes),
            ));
        }
        let tape = field.tape();
        let diff = field
            .gather_rows(&self.senders)?
            .sub(field.gather_rows(&self.receivers)?)?;
        (0..self.dim)
            .map(|a| {
                let col = tape.constant(self.coefficients.slice_cols(a, a + 1));
                diff.mul_col(col)?
                    .scatter_add_rows(&self.receivers, self.num_nodes)
            })
            .collect()
    }

    /// `Σ_a ∂_a v_a` of the first `dim` columns, `N × 1`.
    pub fn divergence_var<'t>(&self, velocity: Var<'t>) -> Result<Var<'t>> {
        if velocity.cols() < self.dim {
            return Err(Error::shape(
                "divergence",
                format!("{} velocity columns in {}-d", velocity.cols(), self.dim),
            ));
        }
        let grads = self.gradient_var(velocity.slice_cols(0, self.dim)?)?;
        let mut div = grads[0].slice_cols(0, 1)?;
        for (a, g) in grads.iter().enumerate().skip(1) {
            div = div.add(g.slice_cols(a, a + 1)?)?;
        }
        Ok(div)
    }

    /// Mean over valid nodes of a per-node `N × 1` quantity.
    pub fn valid_mean<'t>(&self, per_node: Var<'t>) -> Result<Var<'t>> {
        let mask = per_node.tape().constant(self.valid.clone());
        Ok(per_node
            .mul_col(mask)?
            .sum()
            .scale(1.0 / self.num_valid().max(1) as f64))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_difference_check, Tape};
    use crate::data::generate_mesh;
    use crate::mesh::NodeType;

    #[test]
    fn cross_stencil_has_half_identity_moment() {
        let h = 0.1;
        let s = WlsStencil::new(
            &[vec![h, 0.0], vec![-h, 0.0], vec![0.0, h], vec![0.0, -h]],
            WlsWeighting::Uniform,
            None,
        )
        .unwrap();
        let m = s.moment();
        assert!((m[(0, 0)] - h * h / 2.0).abs() < 1e-18 && m[(0, 1)].abs() < 1e-18);
        let a = s.check_assumption();
        assert!((a.c0_hat - 0.5).abs() < 1e-12 && (a.c1_hat - 0.5).abs() < 1e-12 && a.satisfied);
        let g = s.gradient(&[h * 3.0, -h * 3.0, -h * 2.0, h * 2.0]).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_stencil_is_degenerate() {
        let s = WlsStencil::new(
            &[vec![0.1, 0.1], vec![-0.2, -0.2], vec![0.3, 0.3]],
            WlsWeighting::Uniform,
            None,
        )
        .unwrap();
        let a = s.check_assumption();
        assert!(!a.satisfied);
        assert!(a.c0_hat.abs() < 1e-12);
        assert!(matches!(
            s.gradient(&[0.0; 3]),
            Err(Error::DegenerateStencil { .. })
        ));
    }

    #[test]
    fn weights_sum_to_one_and_eigen_sandwich_holds() {
        let mesh = generate_mesh(120, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for weighting in [WlsWeighting::Uniform, WlsWeighting::InverseDistance] {
            for i in 0..mesh.num_nodes() {
                let s = WlsStencil::from_mesh(&mesh, i, weighting, None).unwrap();
                assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(s.weights.iter().all(|&w| w >= 0.0));
                let a = s.check_assumption();
                let m = s.moment();
                assert!((&m - m.transpose()).abs().max() < 1e-15);
                for _ in 0..100 {
                    let v = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                    let q = (v.transpose() * &m * &v)[(0, 0)];
                    let n2 = v.norm_squared() * s.h * s.h;
                    assert!(
                        q >= a.c0_hat * n2 * (1.0 - 1e-10) && q <= a.c1_hat * n2 * (1.0 + 1e-10)
                    );
                }
            }
        }
    }

    #[test]
    fn operator_matches_per_stencil_normal_equations() {
        let mesh = generate_mesh(80, 2).unwrap();
        let op = WlsOperator::new(&mesh, WlsWeighting::Uniform).unwrap();
        assert!(op.degenerate.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = Tensor::from_vec(
            80,
            2,
            (0..160).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let grads = op.gradient(&field).unwrap();
        for i in 0..80 {
            // Dense normal equations solved directly for this node.
            let nb = mesh.neighborhood(i).unwrap();
            let b = DMatrix::from_fn(nb.len(), 2, |r, c| {
                mesh.position(nb[r])[c] - mesh.position(i)[c]
            });
            let w = 1.0 / nb.len() as f64;
            let lhs = b.transpose() * &b * w;
            for k in 0..2 {
                let d = DVector::from_fn(nb.len(), |r, _| field.get(nb[r], k) - field.get(i, k));
                let rhs = b.transpose() * d * w;
                let g = lhs.clone().lu().solve(&rhs).unwrap();
                for a in 0..2 {
                    assert!((grads[a].get(i, k) - g[a]).abs() < 1e-9 * (1.0 + g[a].abs()));
                }
            }
        }
        let tape = Tape::new();
        let v = tape.constant(field.clone());
        let gv = op.gradient_var(v).unwrap();
        for a in 0..2 {
            assert!(
                gv[a]
                    .value()
                    .zip_map(&grads[a], |x, y| (x - y).abs())
                    .max_abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn constant_velocity_has_zero_divergence_and_linear_is_exact() {
        let mesh = generate_mesh(100, 6).unwrap();
        let op = WlsOperator::new(&mesh, WlsWeighting::InverseDistance).unwrap();
        let tape = Tape::new();
        let constant = tape.constant(Tensor::from_vec(100, 2, [0.7, -0.3].repeat(100)).unwrap());
        assert!(op.divergence_var(constant).unwrap().value().max_abs() < 1e-12);
        let lin: Vec<f64> = (0..100)
            .flat_map(|i| {
                let p = mesh.position(i);
                [2.0 * p[0] + p[1], -p[0] + 0.5 * p[1]]
            })
            .collect();
        let div = op
            .divergence_var(tape.constant(Tensor::from_vec(100, 2, lin).unwrap()))
            .unwrap();
        assert!(div.value().map(|x| x - 2.5).max_abs() < 1e-10);
    }

    #[test]
    fn isolated_node_is_skipped() {
        let pos = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0];
        let mesh =
            MeshGraph::from_pairs(2, pos, &[(0, 1), (1, 2), (2, 0)], vec![NodeType::Normal; 4])
                .unwrap();
        let op = WlsOperator::new(&mesh, WlsWeighting::Uniform).unwrap();
        assert_eq!(op.degenerate, vec![3]);
        let tape = Tape::new();
        let per_node = Tensor::from_vec(4, 1, vec![1.0, 2.0, 3.0, 100.0]).unwrap();
        let m = op.valid_mean(tape.constant(per_node)).unwrap();
        assert_eq!(m.item(), 2.0);
    }

    #[test]
    fn operator_gradient_check() {
        let mesh = generate_mesh(30, 1).unwrap();
        let op = WlsOperator::new(&mesh, WlsWeighting::Uniform).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(
            30,
            2,
            (0..60).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let err = finite_difference_check(
            |_, v| {
                let d = op.divergence_var(v)?;
                op.valid_mean(d.square())
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
