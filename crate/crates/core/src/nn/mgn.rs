use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::{Init, Mlp};
use crate::autodiff::{Bound, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::MeshGraph;

/// Directed edge list of a mesh as shared index arrays.
#[derive(Clone, Debug)]
pub struct MeshEdges {
    pub senders: Rc<[usize]>,
    pub receivers: Rc<[usize]>,
    pub num_nodes: usize,
}

impl MeshEdges {
    pub fn from_mesh(mesh: &MeshGraph) -> Self {
        let (s, r): (Vec<usize>, Vec<usize>) = mesh.edges().iter().copied().unzip();
        Self {
            senders: s.into(),
            receivers: r.into(),
            num_nodes: mesh.num_nodes(),
        }
    }

    pub fn len(&self) -> usize {
        self.senders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.senders.is_empty()
    }
}

/// `E × (dim + 1)` raw edge features `[p_r − p_s, ‖p_r − p_s‖]`.
pub fn edge_features(mesh: &MeshGraph) -> Tensor {
    let dim = mesh.dim();
    let edges = mesh.edges();
    let mut out = Tensor::zeros(edges.len(), dim + 1);
    for (k, &(s, r)) in edges.iter().enumerate() {
        let (ps, pr) = (mesh.position(s), mesh.position(r));
        let mut d2 = 0.0;
        for a in 0..dim {
            let d = pr[a] - ps[a];
            out.set(k, a, d);
            d2 += d * d;
        }
        out.set(k, dim, d2.sqrt());
    }
    out
}

/// Message-passing block: `e' = f_e([e, z_r, z_s])`, `ē_i = Σ_{r_k = i} e'_k`,
/// node increment `f_v([z, ē])`.
#[derive(Clone, Debug)]
pub struct MgnBlock {
    pub edge_mlp: Mlp,
    pub node_mlp: Mlp,
    pub width: usize,
}

impl MgnBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            edge_mlp: Mlp::new(
                store,
                &format!("{name}.edge"),
                [3 * width, hidden, width],
                Init::He,
                rng,
            ),
            node_mlp: Mlp::new(
                store,
                &format!("{name}.node"),
                [2 * width, hidden, width],
                Init::He,
                rng,
            ),
            width,
        }
    }

    /// Returns the node increment and the updated edge latents.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        z: Var<'t>,
        edge_latents: Var<'t>,
        edges: &MeshEdges,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if edge_latents.rows() != edges.len() {
            return Err(Error::shape(
                "mgn_block",
                format!(
                    "{} edge latents for {} edges",
                    edge_latents.rows(),
                    edges.len()
                ),
            ));
        }
        let tape = z.tape();
        let zr = z.gather_rows(&edges.receivers)?;
        let zs = z.gather_rows(&edges.senders)?;
        let e_new = self
            .edge_mlp
            .forward(p, tape.concat_cols(&[edge_latents, zr, zs])?)?;
        let agg = e_new.scatter_add_rows(&edges.receivers, z.rows())?;
        let dz = self.node_mlp.forward(p, tape.concat_cols(&[z, agg])?)?;
        Ok((dz, e_new))
    }
}
