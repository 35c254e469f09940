use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Init, Linear, Mlp};
use crate::autodiff::{Bound, ParamStore, RotationTable, Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::MeshGraph;

/// Positional information injected into attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    None,
    /// Axis-wise rotation of queries and keys.
    #[default]
    Rope,
    /// Learned map of centered position added to the encoded nodes.
    LearnedAbs,
    /// Learned map of the offset `p_j − p_i` added to each head's scores.
    LearnedRelbias,
    /// Scores shifted by `ln exp(−‖p_j − p_i‖ / h)`, i.e. probabilities
    /// weighted by the distance kernel before normalization.
    DistanceWeighted,
}

/// How the adjacency restricts attention scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSemantics {
    /// Non-neighbors receive `−∞` before the softmax and get zero weight.
    #[default]
    Additive,
    /// Scores are multiplied by the 0/1 adjacency, then soft-maxed over all
    /// nodes. Dense only.
    Hadamard,
}

/// Receiver-major sparse attention pattern with per-entry geometry.
#[derive(Clone, Debug)]
pub struct AttentionGraph {
    num_nodes: usize,
    dim: usize,
    receivers: Rc<[usize]>,
    senders: Rc<[usize]>,
    offsets: Rc<[usize]>,
    /// `E × dim` offsets `p_sender − p_receiver`.
    rel_pos: Tensor,
    /// `E × 1` values `−‖p_sender − p_receiver‖ / h`.
    log_distance_weight: Tensor,
}

impl AttentionGraph {
    /// Mesh neighbors of each node plus, optionally, the node itself.
    pub fn from_mesh(mesh: &MeshGraph, self_loops: bool) -> Self {
        let n = mesh.num_nodes();
        let h = mesh.geometry().mesh_size_h;
        let lists: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut nb = mesh.neighborhood(i).expect("node in range");
                if self_loops {
                    nb.push(i);
                    nb.sort_unstable();
                }
                nb
            })
            .collect();
        Self::from_lists(mesh, &lists, h)
    }

    /// Pattern without geometry: receiver `i` attends to `lists[i]`.
    pub fn from_index_lists(lists: &[Vec<usize>]) -> Self {
        Self::build(lists, 0, |_, _| (Vec::new(), 0.0))
    }

    /// Attention pattern where receiver `i` attends to `lists[i]`.
    pub fn from_lists(mesh: &MeshGraph, lists: &[Vec<usize>], mesh_size: f64) -> Self {
        let scale = if mesh_size > 0.0 { mesh_size } else { 1.0 };
        Self::build(lists, mesh.dim(), |i, j| {
            let (pi, pj) = (mesh.position(i), mesh.position(j));
            let rel: Vec<f64> = pj.iter().zip(pi).map(|(a, b)| a - b).collect();
            let dist = rel.iter().map(|x| x * x).sum::<f64>().sqrt();
            (rel, -dist / scale)
        })
    }

    fn build(
        lists: &[Vec<usize>],
        dim: usize,
        geometry: impl Fn(usize, usize) -> (Vec<f64>, f64),
    ) -> Self {
        let mut receivers = Vec::new();
        let mut senders = Vec::new();
        let mut offsets = vec![0];
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                receivers.push(i);
                senders.push(j);
            }
            offsets.push(receivers.len());
        }
        let e = receivers.len();
        let mut rel_pos = Tensor::zeros(e, dim);
        let mut logw = Tensor::zeros(e, 1);
        for k in 0..e {
            let (rel, w) = geometry(receivers[k], senders[k]);
            rel_pos.row_mut(k).copy_from_slice(&rel);
            logw.set(k, 0, w);
        }
        Self {
            num_nodes: lists.len(),
            dim,
            receivers: receivers.into(),
            senders: senders.into(),
            offsets: offsets.into(),
            rel_pos,
            log_distance_weight: logw,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_entries(&self) -> usize {
        self.receivers.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn senders_of(&self, i: usize) -> &[usize] {
        &self.senders[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn rel_pos(&self) -> &Tensor {
        &self.rel_pos
    }

    pub fn log_distance_weight(&self) -> &Tensor {
        &self.log_distance_weight
    }

    /// Errors when some receiver admits no sender.
    pub fn check_rows(&self) -> Result<()> {
        match self.offsets.windows(2).position(|w| w[0] == w[1]) {
            Some(row) => Err(Error::EmptyAttentionRow { row }),
            None => Ok(()),
        }
    }

    /// Dense `N × N` indicator, row-major.
    pub fn dense_support(&self) -> Vec<bool> {
        let n = self.num_nodes;
        let mut out = vec![false; n * n];
        for k in 0..self.receivers.len() {
            out[self.receivers[k] * n + self.senders[k]] = true;
        }
        out
    }
}

/// Multi-head attention restricted to a sparse pattern.
///
/// `q` has one row per receiver, `k` and `v` one row per sender; `bias`
/// adds an `E × heads` term to the scaled scores. Receivers without senders
/// produce zero rows.
pub fn sparse_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    graph: &AttentionGraph,
    heads: usize,
    bias: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let d = q.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    let qe = q.gather_rows(&graph.receivers)?;
    let ke = k.gather_rows(&graph.senders)?;
    let mut scores = qe
        .grouped_row_dot(ke, heads)?
        .scale(1.0 / ((d / heads) as f64).sqrt());
    if let Some(b) = bias {
        scores = scores.add(b)?;
    }
    let weights = scores.segment_softmax(&graph.offsets)?;
    let ve = v.gather_rows(&graph.senders)?;
    ve.grouped_scale(weights)?
        .scatter_add_rows(&graph.receivers, graph.num_nodes)
}

/// Reference dense implementation of [`sparse_attention`] without bias.
pub fn dense_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    graph: &AttentionGraph,
    heads: usize,
    semantics: MaskSemantics,
) -> Result<Var<'t>> {
    let tape = q.tape();
    let d = q.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    let dh = d / heads;
    let support = graph.dense_support();
    let mask: Rc<[bool]> = support.iter().map(|s| !s).collect::<Vec<_>>().into();
    let n = graph.num_nodes;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (
            q.slice_cols(h * dh, (h + 1) * dh)?,
            k.slice_cols(h * dh, (h + 1) * dh)?,
            v.slice_cols(h * dh, (h + 1) * dh)?,
        );
        let scores = qh.matmul(kh.transpose())?.scale(1.0 / (dh as f64).sqrt());
        let weights = match semantics {
            MaskSemantics::Additive => {
                for i in 0..n {
                    if support[i * n..(i + 1) * n].iter().all(|s| !s) {
                        return Err(Error::EmptyAttentionRow { row: i });
                    }
                }
                scores.masked_fill(&mask, f64::NEG_INFINITY)?.softmax_rows()
            }
            MaskSemantics::Hadamard => {
                let a = Tensor::from_vec(n, n, support.iter().map(|&s| s as u8 as f64).collect())?;
                scores.mul(tape.constant(a))?.softmax_rows()
            }
        };
        outs.push(weights.matmul(vh)?);
    }
    tape.concat_cols(&outs)
}

/// Unmasked multi-head attention of every row over every row.
pub fn full_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let tape = q.tape();
    let d = q.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (
            q.slice_cols(h * dh, (h + 1) * dh)?,
            k.slice_cols(h * dh, (h + 1) * dh)?,
            v.slice_cols(h * dh, (h + 1) * dh)?,
        );
        let weights = qh
            .matmul(kh.transpose())?
            .scale(1.0 / (dh as f64).sqrt())
            .softmax_rows();
        outs.push(weights.matmul(vh)?);
    }
    tape.concat_cols(&outs)
}

/// Projected multi-head attention with a positional-encoding mode.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub pe: PeMode,
    pub relbias: Option<Mlp>,
    pub semantics: MaskSemantics,
}

impl AttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        pe: PeMode,
        dim: usize,
        semantics: MaskSemantics,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        let lin = |store: &mut ParamStore, part: &str, rng: &mut ChaCha8Rng| {
            Linear::new(
                store,
                &format!("{name}.{part}"),
                width,
                width,
                true,
                Init::He,
                rng,
            )
        };
        let q = lin(store, "q", rng);
        let k = lin(store, "k", rng);
        let v = lin(store, "v", rng);
        let o = lin(store, "o", rng);
        let relbias = (pe == PeMode::LearnedRelbias).then(|| {
            Mlp::new(
                store,
                &format!("{name}.relbias"),
                [dim, 16, heads],
                Init::Zero,
                rng,
            )
        });
        Ok(Self {
            q,
            k,
            v,
            o,
            heads,
            pe,
            relbias,
            semantics,
        })
    }

    /// Attention of `queries` over `keys_values` along `graph`.
    ///
    /// `rope` must be provided in [`PeMode::Rope`]; it rotates projected
    /// queries and keys by each node's own position.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        queries: Var<'t>,
        keys_values: Var<'t>,
        graph: &AttentionGraph,
        rope: Option<&Rc<RotationTable>>,
    ) -> Result<Var<'t>> {
        let tape = queries.tape();
        let mut q = self.q.forward(p, queries)?;
        let mut k = self.k.forward(p, keys_values)?;
        let v = self.v.forward(p, keys_values)?;
        let mut bias = None;
        match self.pe {
            PeMode::Rope => {
                let table =
                    rope.ok_or_else(|| Error::Config("rotary mode needs a rotation table".into()))?;
                q = q.rotate_pairs(table)?;
                k = k.rotate_pairs(table)?;
            }
            PeMode::LearnedRelbias => {
                let mlp = self.relbias.as_ref().expect("relative bias network");
                bias = Some(mlp.forward(p, tape.constant(graph.rel_pos.clone()))?);
            }
            PeMode::DistanceWeighted => {
                let w = &graph.log_distance_weight;
                let mut b = Tensor::zeros(w.rows(), self.heads);
                for r in 0..w.rows() {
                    b.row_mut(r).iter_mut().for_each(|x| *x = w.get(r, 0));
                }
                bias = Some(tape.constant(b));
            }
            PeMode::None | PeMode::LearnedAbs => {}
        }
        let att = match self.semantics {
            MaskSemantics::Additive => {
                graph.check_rows()?;
                sparse_attention(q, k, v, graph, self.heads, bias)?
            }
            MaskSemantics::Hadamard => {
                if bias.is_some() {
                    return Err(Error::Config(
                        "Hadamard masking supports no score bias".into(),
                    ));
                }
                dense_attention(q, k, v, graph, self.heads, MaskSemantics::Hadamard)?
            }
        };
        self.o.forward(p, att)
    }

    /// Unmasked self-attention among all rows of `x`; positional modes are
    /// ignored.
    pub fn forward_full<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let q = self.q.forward(p, x)?;
        let k = self.k.forward(p, x)?;
        let v = self.v.forward(p, x)?;
        self.o.forward(p, full_attention(q, k, v, self.heads)?)
    }
}
