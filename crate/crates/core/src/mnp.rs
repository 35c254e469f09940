//! Multi-node prediction: each sampled center's final latent, packed with
//! its neighbors' encoded latents, must let a small ring transformer decode
//! the neighbors' next-step targets.

use std::rc::Rc;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::MeshGraph;
use crate::nn::{AttentionGraph, AttentionLayer, GatedMlp, MaskSemantics, PeMode, RmsNorm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnpConfig {
    pub enabled: bool,
    /// Centers sampled per training step.
    pub centers: usize,
    /// Neighbor cap per star.
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
    /// When false, no token attends to the center token except the center
    /// itself.
    pub attend_center: bool,
}

impl Default for MnpConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            centers: 256,
            k: 12,
            alpha: 0.2,
            attend_center: true,
        }
    }
}

/// `m` distinct internal nodes drawn uniformly without replacement, sorted.
pub fn sample_centers(mesh: &MeshGraph, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let internal = mesh.internal_nodes();
    if m > internal.len() {
        return Err(Error::Config(format!(
            "{m} centers requested but the mesh has {} internal nodes",
            internal.len()
        )));
    }
    let mut picked: Vec<usize> = sample(rng, internal.len(), m)
        .into_iter()
        .map(|k| internal[k])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Packed star sequences.
///
/// Only valid tokens are stored: star `s` occupies rows
/// `offsets[s]..offsets[s + 1]`, the first being the center. The padded
/// `|C| × (K + 1)` layout is recovered by [`StarBatch::pad_mask`].
#[derive(Clone, Debug)]
pub struct StarBatch {
    pub centers: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
    pub k: usize,
    offsets: Vec<usize>,
    /// Row of each token in `[Z_L; Z_0]`.
    source: Rc<[usize]>,
    neighbor_tokens: Rc<[usize]>,
    neighbor_nodes: Rc<[usize]>,
    /// `1 / (|C| K_i)` per neighbor token.
    weights: Tensor,
    graph: AttentionGraph,
}

impl StarBatch {
    pub fn new(mesh: &MeshGraph, centers: &[usize], k: usize, attend_center: bool) -> Result<Self> {
        let n = mesh.num_nodes();
        let mut neighbors = Vec::with_capacity(centers.len());
        let mut offsets = vec![0];
        let mut source = Vec::new();
        let mut neighbor_tokens = Vec::new();
        let mut neighbor_nodes = Vec::new();
        let mut weights = Vec::new();
        let mut lists = Vec::new();
        for &c in centers {
            let mut nb = mesh.neighborhood(c)?;
            nb.truncate(k);
            let start = source.len();
            source.push(c);
            for &j in &nb {
                neighbor_tokens.push(source.len());
                neighbor_nodes.push(j);
                weights.push(1.0 / (centers.len() * nb.len()) as f64);
                source.push(n + j);
            }
            let end = source.len();
            for t in start..end {
                let first = if attend_center || t == start {
                    start
                } else {
                    start + 1
                };
                lists.push((first..end).collect::<Vec<_>>());
            }
            offsets.push(end);
            neighbors.push(nb);
        }
        let count = weights.len();
        Ok(Self {
            centers: centers.to_vec(),
            neighbors,
            k,
            offsets,
            source: source.into(),
            neighbor_tokens: neighbor_tokens.into(),
            neighbor_nodes: neighbor_nodes.into(),
            weights: Tensor::from_vec(count, 1, weights)?,
            graph: AttentionGraph::from_index_lists(&lists),
        })
    }

    pub fn num_stars(&self) -> usize {
        self.centers.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.source.len()
    }

    /// Packed rows of star `s`.
    pub fn token_range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    /// `|C| × (K + 1)` validity flags of the padded layout.
    pub fn pad_mask(&self) -> Vec<bool> {
        let width = self.k + 1;
        let mut mask = vec![false; self.num_stars() * width];
        for s in 0..self.num_stars() {
            let valid = self.token_range(s).len();
            mask[s * width..s * width + valid]
                .iter_mut()
                .for_each(|m| *m = true);
        }
        mask
    }

    /// Packed tokens gathered from final latents `z_last` (centers) and
    /// encoded latents `z_enc` (neighbors).
    pub fn tokens<'t>(&self, z_last: Var<'t>, z_enc: Var<'t>) -> Result<Var<'t>> {
        if z_last.shape() != z_enc.shape() {
            return Err(Error::shape(
                "build_stars",
                format!("latents {:?} and {:?}", z_last.shape(), z_enc.shape()),
            ));
        }
        z_last
            .tape()
            .concat_rows(&[z_last, z_enc])?
            .gather_rows(&self.source)
    }

    pub fn graph(&self) -> &AttentionGraph {
        &self.graph
    }

    pub fn neighbor_nodes(&self) -> &[usize] {
        &self.neighbor_nodes
    }
}

/// One pre-norm attention + gated MLP layer restricted to each star.
#[derive(Clone, Debug)]
pub struct RingTransformer {
    pub norm1: RmsNorm,
    pub attention: AttentionLayer,
    pub norm2: RmsNorm,
    pub mlp: GatedMlp,
}

impl RingTransformer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: RmsNorm::new(store, &format!("{name}.norm1"), width),
            attention: AttentionLayer::new(
                store,
                &format!("{name}.attn"),
                width,
                heads,
                PeMode::None,
                0,
                MaskSemantics::Additive,
                rng,
            )?,
            norm2: RmsNorm::new(store, &format!("{name}.norm2"), width),
            mlp: GatedMlp::new(store, &format!("{name}.mlp"), width, hidden, rng),
        })
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        tokens: Var<'t>,
        batch: &StarBatch,
    ) -> Result<Var<'t>> {
        let h = self.norm1.forward(p, tokens)?;
        let x = tokens.add(self.attention.forward(p, h, h, &batch.graph, None)?)?;
        x.add(self.mlp.forward(p, self.norm2.forward(p, x)?)?)
    }
}

/// `L_MNP`: mean over centers of the mean over valid neighbors of
/// `‖D(O_ij) − y_j‖²`. `targets` has one row per mesh node.
pub fn mnp_loss<'t, D>(
    outputs: Var<'t>,
    decoder: D,
    targets: Var<'t>,
    batch: &StarBatch,
) -> Result<Var<'t>>
where
    D: Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = outputs.tape();
    if batch.neighbor_tokens.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let decoded = decoder(outputs.gather_rows(&batch.neighbor_tokens)?)?;
    let y = targets.gather_rows(&batch.neighbor_nodes)?;
    decoded
        .sub(y)?
        .square()
        .sum_cols()
        .mul(tape.constant(batch.weights.clone()))
        .map(|v| v.sum())
}

/// `main + α · mnp`.
pub fn combine_losses<'t>(main: Var<'t>, mnp: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    main.add(mnp.scale(alpha))
}

/// Ring transformer plus its sampling configuration.
#[derive(Clone, Debug)]
pub struct MnpHead {
    pub ring: RingTransformer,
    pub config: MnpConfig,
}

impl MnpHead {
    pub fn new(
        store: &mut ParamStore,
        width: usize,
        heads: usize,
        hidden: usize,
        config: MnpConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            ring: RingTransformer::new(store, "mnp.ring", width, heads, hidden, rng)?,
            config,
        })
    }

    /// Stars for `centers` with this head's cap and attention variant.
    pub fn stars(&self, mesh: &MeshGraph, centers: &[usize]) -> Result<StarBatch> {
        StarBatch::new(mesh, centers, self.config.k, self.config.attend_center)
    }

    pub fn loss<'t, D>(
        &self,
        p: &Bound<'t>,
        z_last: Var<'t>,
        z_enc: Var<'t>,
        batch: &StarBatch,
        decoder: D,
        targets: Var<'t>,
    ) -> Result<Var<'t>>
    where
        D: Fn(Var<'t>) -> Result<Var<'t>>,
    {
        let tokens = batch.tokens(z_last, z_enc)?;
        let out = self.ring.forward(p, tokens, batch)?;
        mnp_loss(out, decoder, targets, batch)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::autodiff::{finite_difference_check, Tape};
    use crate::data::generate_mesh;
    use crate::mesh::NodeType;
    use crate::nn::{Init, Mlp};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| r.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn jitter(store: &mut ParamStore, seed: u64) {
        let mut r = rng(seed);
        for t in store.tensors_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x += r.random_range(-0.3..0.3));
        }
    }

    fn setup(seed: u64) -> (MeshGraph, ParamStore, RingTransformer, Mlp) {
        let mesh = generate_mesh(60, seed).unwrap();
        let mut store = ParamStore::new();
        let ring = RingTransformer::new(&mut store, "r", 4, 2, 6, &mut rng(seed)).unwrap();
        let dec = Mlp::new(&mut store, "d", [4, 6, 3], Init::He, &mut rng(seed + 1));
        jitter(&mut store, seed);
        (mesh, store, ring, dec)
    }

    #[test]
    fn center_sampling_edge_cases_and_errors() {
        let mesh = generate_mesh(60, 1).unwrap();
        let internal = mesh.internal_nodes();
        assert_eq!(
            sample_centers(&mesh, internal.len(), &mut rng(1)).unwrap(),
            internal
        );
        assert!(sample_centers(&mesh, 0, &mut rng(1)).unwrap().is_empty());
        assert!(sample_centers(&mesh, internal.len() + 1, &mut rng(1)).is_err());
        let c = sample_centers(&mesh, 10, &mut rng(2)).unwrap();
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(c.iter().all(|i| mesh.node_types()[*i] == NodeType::Normal));
    }

    #[test]
    fn center_frequencies_are_uniform() {
        let mesh = generate_mesh(40, 3).unwrap();
        let internal = mesh.internal_nodes();
        let (n, m, draws) = (internal.len(), 5, 100_000);
        let mut counts = vec![0usize; mesh.num_nodes()];
        let mut r = rng(7);
        for _ in 0..draws {
            for c in sample_centers(&mesh, m, &mut r).unwrap() {
                counts[c] += 1;
            }
        }
        let p = m as f64 / n as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for &i in &internal {
            assert!(
                (counts[i] as f64 - mean).abs() < 4.0 * sd,
                "node {i}: {}",
                counts[i]
            );
            chi2 += (counts[i] as f64 - mean).powi(2) / mean;
        }
        // Chi-square with n−1 dof; mean n−1, sd sqrt(2(n−1)).
        let dof = (n - 1) as f64;
        assert!(chi2 < dof + 4.0 * (2.0 * dof).sqrt(), "{chi2}");
    }

    #[test]
    fn star_layout_and_gather() {
        let (mesh, ..) = setup(2);
        let centers = sample_centers(&mesh, 6, &mut rng(3)).unwrap();
        let batch = StarBatch::new(&mesh, &centers, 8, true).unwrap();
        let mask = batch.pad_mask();
        let n = mesh.num_nodes();
        let (zl, z0) = (random(n, 4, 1), random(n, 4, 2));
        let tape = Tape::new();
        let tokens = batch
            .tokens(tape.constant(zl.clone()), tape.constant(z0.clone()))
            .unwrap()
            .value();
        for (s, &c) in centers.iter().enumerate() {
            let nb = mesh.neighborhood(c).unwrap();
            let kept = nb.len().min(8);
            assert_eq!(batch.neighbors[s], nb[..kept]);
            assert_eq!(
                mask[s * 9..(s + 1) * 9].iter().filter(|m| **m).count(),
                kept + 1
            );
            assert!(mask[s * 9]);
            let r = batch.token_range(s);
            assert_eq!(tokens.row(r.start), zl.row(c));
            for (t, &j) in r.skip(1).zip(&nb) {
                assert_eq!(tokens.row(t), z0.row(j));
            }
        }
    }

    #[test]
    fn two_neighbor_star_and_first_neighbor_cap() {
        // Path 0 - 1 - 2: node 1 has two neighbors.
        let mesh = MeshGraph::from_pairs(
            2,
            vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0],
            &[(0, 1), (1, 2)],
            vec![NodeType::Normal; 3],
        )
        .unwrap();
        let b = StarBatch::new(&mesh, &[1], 8, true).unwrap();
        assert_eq!(
            b.pad_mask(),
            [true, true, true, false, false, false, false, false, false]
        );
        let tri = generate_mesh(30, 4).unwrap();
        let c = tri.internal_nodes()[0];
        let b = StarBatch::new(&tri, &[c], 1, true).unwrap();
        assert_eq!(b.neighbors[0], vec![tri.neighborhood(c).unwrap()[0]]);
    }

    #[test]
    fn zero_ring_is_residual() {
        let (mesh, mut store, ring, _) = setup(5);
        store
            .tensors_mut()
            .iter_mut()
            .for_each(|t| t.data_mut().fill(0.0));
        let c = mesh.internal_nodes()[0];
        let batch = StarBatch::new(&mesh, &[c], 12, true).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(random(batch.num_tokens(), 4, 1));
        assert_eq!(ring.forward(&p, x, &batch).unwrap().value(), x.value());
    }

    fn run_ring(
        store: &ParamStore,
        ring: &RingTransformer,
        batch: &StarBatch,
        zl: &Tensor,
        z0: &Tensor,
    ) -> Tensor {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let tokens = batch
            .tokens(tape.constant(zl.clone()), tape.constant(z0.clone()))
            .unwrap();
        ring.forward(&p, tokens, batch).unwrap().value()
    }

    #[test]
    fn stars_are_isolated() {
        let (mesh, store, ring, _) = setup(6);
        let n = mesh.num_nodes();
        let centers = sample_centers(&mesh, 2, &mut rng(1)).unwrap();
        let (zl, z0) = (random(n, 4, 1), random(n, 4, 2));
        let both = StarBatch::new(&mesh, &centers, 12, true).unwrap();
        let out = run_ring(&store, &ring, &both, &zl, &z0);
        for s in 0..2 {
            let single = StarBatch::new(&mesh, &centers[s..s + 1], 12, true).unwrap();
            let alone = run_ring(&store, &ring, &single, &zl, &z0);
            for (t, u) in both.token_range(s).zip(0..) {
                assert_eq!(out.row(t), alone.row(u));
            }
        }
        // Perturb star B's center latent; star A must stay bit-identical.
        let mut zl2 = zl.clone();
        zl2.row_mut(centers[1]).iter_mut().for_each(|x| *x += 1.0);
        let out2 = run_ring(&store, &ring, &both, &zl2, &z0);
        for t in both.token_range(0) {
            assert_eq!(out.row(t), out2.row(t));
        }
        assert_ne!(
            out.row(both.token_range(1).start),
            out2.row(both.token_range(1).start)
        );
    }

    #[test]
    fn excluded_center_variant_hides_center_from_neighbors() {
        let (mesh, ..) = setup(7);
        let c = mesh.internal_nodes()[0];
        let b = StarBatch::new(&mesh, &[c], 12, false).unwrap();
        let g = b.graph();
        assert_eq!(g.senders_of(0)[0], 0);
        for t in 1..b.num_tokens() {
            assert!(!g.senders_of(t).contains(&0));
        }
    }

    /// Direct double loop over centers and neighbors.
    fn naive_loss(
        out: &Tensor,
        decoded: impl Fn(&[f64]) -> Vec<f64>,
        y: &Tensor,
        batch: &StarBatch,
    ) -> f64 {
        let mut total = 0.0;
        for s in 0..batch.num_stars() {
            let nb = &batch.neighbors[s];
            let mut star = 0.0;
            for (t, &j) in batch.token_range(s).skip(1).zip(nb) {
                let d = decoded(out.row(t));
                star += d
                    .iter()
                    .zip(y.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>();
            }
            total += star / nb.len() as f64;
        }
        total / batch.num_stars() as f64
    }

    #[test]
    fn batched_loss_matches_double_loop() {
        let (mesh, store, ring, dec) = setup(8);
        let n = mesh.num_nodes();
        let centers = sample_centers(&mesh, 5, &mut rng(2)).unwrap();
        let batch = StarBatch::new(&mesh, &centers, 12, true).unwrap();
        let (zl, z0, y) = (random(n, 4, 1), random(n, 4, 2), random(n, 3, 3));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let tokens = batch.tokens(tape.constant(zl), tape.constant(z0)).unwrap();
        let out = ring.forward(&p, tokens, &batch).unwrap();
        let loss = mnp_loss(
            out,
            |x| dec.forward(&p, x),
            tape.constant(y.clone()),
            &batch,
        )
        .unwrap()
        .item();
        let outv = out.value();
        let decode = |row: &[f64]| {
            let t2 = Tape::new();
            let p2 = store.bind(&t2);
            dec.forward(
                &p2,
                t2.constant(Tensor::from_vec(1, 4, row.to_vec()).unwrap()),
            )
            .unwrap()
            .value()
            .into_data()
        };
        let want = naive_loss(&outv, decode, &y, &batch);
        assert!(
            (loss - want).abs() < 1e-12 * want.max(1.0),
            "{loss} vs {want}"
        );
    }

    #[test]
    fn loss_fixtures() {
        let mesh = MeshGraph::from_pairs(
            2,
            vec![0.0, 0.0, 1.0, 0.0],
            &[(0, 1)],
            vec![NodeType::Normal; 2],
        )
        .unwrap();
        let batch = StarBatch::new(&mesh, &[0], 12, true).unwrap();
        let tape = Tape::new();
        let out = tape.constant(Tensor::from_rows(&[vec![9.0, 9.0], vec![1.0, 2.0]]).unwrap());
        let y = Tensor::from_rows(&[vec![0.0, 0.0], vec![4.0, -2.0]]).unwrap();
        let loss = mnp_loss(out, Ok, tape.constant(y), &batch).unwrap().item();
        assert_eq!(loss, 9.0 + 16.0);
        let perfect = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(
            mnp_loss(out, Ok, tape.constant(perfect), &batch)
                .unwrap()
                .item(),
            0.0
        );
        let (one, two) = (
            tape.constant(Tensor::scalar(1.0)),
            tape.constant(Tensor::scalar(1.0)),
        );
        assert!((combine_losses(one, two, 0.2).unwrap().item() - 1.2).abs() < 1e-15);
        assert_eq!(
            combine_losses(one, tape.constant(Tensor::scalar(7.0)), 0.0)
                .unwrap()
                .item(),
            1.0
        );
    }

    #[test]
    fn padding_is_neutral() {
        let (mesh, store, ring, dec) = setup(9);
        let n = mesh.num_nodes();
        let centers = sample_centers(&mesh, 8, &mut rng(4)).unwrap();
        let max_degree = (0..n)
            .map(|i| mesh.neighborhood(i).unwrap().len())
            .max()
            .unwrap();
        let (zl, z0, y) = (random(n, 4, 1), random(n, 4, 2), random(n, 3, 3));
        let eval = |k: usize| {
            let batch = StarBatch::new(&mesh, &centers, k, true).unwrap();
            let tape = Tape::new();
            let p = store.bind(&tape);
            let tokens = batch
                .tokens(tape.constant(zl.clone()), tape.constant(z0.clone()))
                .unwrap();
            let out = ring.forward(&p, tokens, &batch).unwrap();
            mnp_loss(
                out,
                |x| dec.forward(&p, x),
                tape.constant(y.clone()),
                &batch,
            )
            .unwrap()
            .item()
        };
        let base = eval(max_degree);
        for k in [max_degree + 1, max_degree + 5, 40] {
            assert!((eval(k) - base).abs() <= 1e-7 * base);
        }
    }

    #[test]
    fn gradient_check_ring_transformer_and_loss() {
        let (mesh, store, ring, dec) = setup(10);
        let n = mesh.num_nodes();
        let centers = sample_centers(&mesh, 3, &mut rng(5)).unwrap();
        let batch = StarBatch::new(&mesh, &centers, 4, true).unwrap();
        let (zl, z0, y) = (random(n, 4, 1), random(n, 4, 2), random(n, 3, 3));
        let np = store.num_scalars();
        let mut joint = store.to_flat().into_data();
        joint.extend_from_slice(zl.data());
        let joint = Tensor::from_vec(1, joint.len(), joint).unwrap();
        let err = finite_difference_check(
            |tape, x| {
                let p = store.bind_from_flat(x.slice_cols(0, np)?)?;
                let zl = x.slice_cols(np, np + n * 4)?.reshape(n, 4)?;
                let tokens = batch.tokens(zl, tape.constant(z0.clone()))?;
                let out = ring.forward(&p, tokens, &batch)?;
                let main = zl.square().mean();
                let mnp = mnp_loss(
                    out,
                    |v| dec.forward(&p, v),
                    tape.constant(y.clone()),
                    &batch,
                )?;
                combine_losses(main, mnp, 0.2)
            },
            &joint,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
