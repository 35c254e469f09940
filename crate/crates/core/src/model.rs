//! Encode-process-decode surrogate with optional multi-node prediction,
//! temporal correction and positional encodings.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, RotationTable, Tensor, Var};
use crate::data::{FeatureLayout, FieldSchema, NodeFeatures, Trajectory};
use crate::error::{Error, Result};
use crate::mesh::MeshGraph;
use crate::mnp::{MnpConfig, MnpHead};
use crate::nn::{
    edge_features, AttentionGraph, Init, MaskSemantics, MeshEdges, MgnBlock, Mlp, PeMode,
    RopeConfig, TransformerBlock, TransolverBlock,
};
use crate::rng::stream;
use crate::temporal::{Corrector, TemporalConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mgn,
    #[default]
    Transformer,
    Transolver,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Processor depth `L`.
    pub layers: usize,
    /// Latent width `d`.
    pub width: usize,
    pub heads: usize,
    /// Hidden width of every MLP; `2 d` when absent.
    pub mlp_hidden: Option<usize>,
    /// Transolver slice count `M`.
    pub slices: usize,
    pub pe: PeMode,
    pub mask: MaskSemantics,
    /// Random long-range attention edges, as a fraction of the node count.
    pub jumpers_fraction: f64,
    /// Append centered coordinates to the node features.
    pub position_features: bool,
    /// Append the backward-difference time derivative to the node features.
    pub history: bool,
    /// Seed of parameter initialization and jumper placement.
    pub seed: u64,
    pub mnp: MnpConfig,
    pub temporal: TemporalConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Transformer,
            layers: 4,
            width: 32,
            heads: 4,
            mlp_hidden: None,
            slices: 16,
            pe: PeMode::Rope,
            mask: MaskSemantics::Additive,
            jumpers_fraction: 0.05,
            position_features: true,
            history: false,
            seed: 0,
            mnp: MnpConfig::default(),
            temporal: TemporalConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(2 * self.width)
    }

    /// Same backbone with every improvement switched off.
    pub fn plain(&self) -> Self {
        Self {
            pe: PeMode::None,
            mnp: MnpConfig {
                enabled: false,
                ..self.mnp.clone()
            },
            temporal: TemporalConfig {
                enabled: false,
                ..self.temporal.clone()
            },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.hidden() == 0 {
            return Err(Error::Config(
                "layers, width, heads and MLP width must be positive".into(),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.architecture == Architecture::Transolver && self.slices == 0 {
            return Err(Error::Config("transolver needs at least one slice".into()));
        }
        if !(0.0..=1.0).contains(&self.jumpers_fraction) {
            return Err(Error::Config(format!(
                "jumpers fraction {} not in [0, 1]",
                self.jumpers_fraction
            )));
        }
        if self.mnp.enabled && (self.mnp.k == 0 || self.mnp.alpha < 0.0) {
            return Err(Error::Config("MNP needs K >= 1 and alpha >= 0".into()));
        }
        if self.pe == PeMode::Rope && self.architecture != Architecture::Mgn {
            RopeConfig::new(2, self.width / self.heads, 1.0, 2.0)?;
        }
        Ok(())
    }
}

/// Affine input normalization and output scaling fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// Scale of the next-step increment per dynamical component.
    pub target_scale: Vec<f64>,
}

const MIN_STD: f64 = 1e-8;

impl Normalizer {
    pub fn identity(input_width: usize, outputs: usize) -> Self {
        Self {
            input_mean: vec![0.0; input_width],
            input_std: vec![1.0; input_width],
            target_scale: vec![1.0; outputs],
        }
    }

    /// Statistics over every state of every trajectory. One-hot columns are
    /// left unscaled.
    pub fn fit(trajs: &[Trajectory], history: bool) -> Result<Self> {
        let first = trajs
            .first()
            .ok_or_else(|| Error::Config("cannot fit statistics on no data".into()))?;
        let layout = FeatureLayout::new(&first.schema, history);
        let width = layout.width();
        let dyn_idx = first.schema.dynamical_indices();
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut count = 0.0;
        let mut dsq = vec![0.0; dyn_idx.len()];
        let mut dcount = 0.0;
        for traj in trajs {
            let c = traj.num_components();
            for t in usize::from(history)..traj.num_steps {
                let f = crate::data::node_features(traj, t, history)?;
                for i in 0..f.num_nodes() {
                    for (k, x) in f.values.row(i).iter().enumerate() {
                        sum[k] += x;
                        sq[k] += x * x;
                    }
                }
                count += f.num_nodes() as f64;
                if t + 1 < traj.num_steps {
                    let (a, b) = (traj.state(t), traj.state(t + 1));
                    for i in 0..traj.num_nodes() {
                        for (k, &ci) in dyn_idx.iter().enumerate() {
                            let d = b[i * c + ci] as f64 - a[i * c + ci] as f64;
                            dsq[k] += d * d;
                        }
                    }
                    dcount += traj.num_nodes() as f64;
                }
            }
        }
        let mut input_mean = vec![0.0; width];
        let mut input_std = vec![1.0; width];
        for k in layout.node_type.end..width {
            let m = sum[k] / count;
            input_mean[k] = m;
            input_std[k] = (sq[k] / count - m * m).max(0.0).sqrt().max(MIN_STD);
        }
        let target_scale = dsq
            .iter()
            .map(|s| (s / dcount.max(1.0)).sqrt().max(MIN_STD))
            .collect();
        Ok(Self {
            input_mean,
            input_std,
            target_scale,
        })
    }

    pub fn normalize_inputs(&self, values: &Tensor) -> Result<Tensor> {
        if values.cols() != self.input_mean.len() {
            return Err(Error::shape(
                "normalize",
                format!(
                    "{} feature columns for {} statistics",
                    values.cols(),
                    self.input_mean.len()
                ),
            ));
        }
        let mut out = values.clone();
        for r in 0..out.rows() {
            for (k, x) in out.row_mut(r).iter_mut().enumerate() {
                *x = (*x - self.input_mean[k]) / self.input_std[k];
            }
        }
        Ok(out)
    }
}

/// Per-mesh structures shared by every forward pass on that mesh.
#[derive(Clone, Debug)]
pub struct MeshContext {
    pub mesh: MeshGraph,
    pub attention: AttentionGraph,
    pub edges: MeshEdges,
    /// Edge features scaled by the mesh size.
    pub edge_features: Tensor,
    pub rope: Option<Rc<RotationTable>>,
    /// `N × dim` centered coordinates.
    pub centered: Tensor,
}

enum Processor {
    Mgn {
        edge_encoder: Mlp,
        blocks: Vec<MgnBlock>,
    },
    Transformer(Vec<TransformerBlock>),
    Transolver(Vec<TransolverBlock>),
}

/// Tape outputs of one forward pass.
pub struct Forward<'t> {
    /// Normalized increments, `N × outputs`.
    pub output: Var<'t>,
    /// `Z^0 … Z^L`.
    pub latents: Vec<Var<'t>>,
    /// States after each corrector, for intermediate supervision.
    pub corrected: Vec<Var<'t>>,
}

pub struct Model {
    pub config: ModelConfig,
    pub schema: FieldSchema,
    pub dim: usize,
    pub params: ParamStore,
    pub normalizer: Normalizer,
    encoder: Mlp,
    decoder: Mlp,
    abs_pe: Option<Mlp>,
    processor: Processor,
    correctors: Vec<Option<Corrector>>,
    pub mnp: Option<MnpHead>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        schema: FieldSchema,
        dim: usize,
        normalizer: Normalizer,
    ) -> Result<Self> {
        config.validate()?;
        let layout = FeatureLayout::new(&schema, config.history);
        let outputs = schema.dynamical_indices().len();
        if normalizer.input_mean.len() != layout.width() || normalizer.target_scale.len() != outputs
        {
            return Err(Error::Config(
                "normalizer does not match the feature layout".into(),
            ));
        }
        let (d, h, hid) = (config.width, config.heads, config.hidden());
        let seed = config.seed;
        let in_width = layout.width() + if config.position_features { dim } else { 0 };
        let mut params = ParamStore::new();
        let encoder = Mlp::new(
            &mut params,
            "encoder",
            [in_width, hid, d],
            Init::He,
            &mut stream(seed, &[1]),
        );
        let abs_pe = (config.pe == PeMode::LearnedAbs).then(|| {
            Mlp::new(
                &mut params,
                "abs_pe",
                [dim, hid, d],
                Init::Zero,
                &mut stream(seed, &[6]),
            )
        });
        let block_pe = match config.architecture {
            Architecture::Transformer => config.pe,
            _ => PeMode::None,
        };
        let processor = match config.architecture {
            Architecture::Mgn => Processor::Mgn {
                edge_encoder: Mlp::new(
                    &mut params,
                    "edge_encoder",
                    [dim + 1, hid, d],
                    Init::He,
                    &mut stream(seed, &[7]),
                ),
                blocks: (0..config.layers)
                    .map(|l| {
                        MgnBlock::new(
                            &mut params,
                            &format!("mgn{l}"),
                            d,
                            hid,
                            &mut stream(seed, &[2, l as u64]),
                        )
                    })
                    .collect(),
            },
            Architecture::Transformer => Processor::Transformer(
                (0..config.layers)
                    .map(|l| {
                        TransformerBlock::new(
                            &mut params,
                            &format!("transformer{l}"),
                            d,
                            h,
                            hid,
                            block_pe,
                            dim,
                            config.mask,
                            &mut stream(seed, &[2, l as u64]),
                        )
                    })
                    .collect::<Result<_>>()?,
            ),
            Architecture::Transolver => Processor::Transolver(
                (0..config.layers)
                    .map(|l| {
                        TransolverBlock::new(
                            &mut params,
                            &format!("transolver{l}"),
                            d,
                            h,
                            config.slices,
                            hid,
                            &mut stream(seed, &[2, l as u64]),
                        )
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let corrector_pe = match config.pe {
            PeMode::Rope | PeMode::LearnedRelbias | PeMode::DistanceWeighted => config.pe,
            _ => PeMode::None,
        };
        let correctors = (0..config.layers)
            .map(|l| {
                config
                    .temporal
                    .corrects(l, config.layers)
                    .then(|| {
                        Corrector::new(
                            &mut params,
                            &format!("corrector{l}"),
                            d,
                            h,
                            hid,
                            corrector_pe,
                            dim,
                            &config.temporal,
                            &mut stream(seed, &[3, l as u64]),
                        )
                    })
                    .transpose()
            })
            .collect::<Result<_>>()?;
        let mnp = config
            .mnp
            .enabled
            .then(|| {
                MnpHead::new(
                    &mut params,
                    d,
                    h,
                    hid,
                    config.mnp.clone(),
                    &mut stream(seed, &[4]),
                )
            })
            .transpose()?;
        let decoder = Mlp::new(
            &mut params,
            "decoder",
            [d, hid, outputs],
            Init::Zero,
            &mut stream(seed, &[5]),
        );
        Ok(Self {
            config,
            schema,
            dim,
            params,
            normalizer,
            encoder,
            decoder,
            abs_pe,
            processor,
            correctors,
            mnp,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn outputs(&self) -> usize {
        self.normalizer.target_scale.len()
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(&self.schema, self.config.history)
    }

    /// Copies parameter values by name, requiring identical names and shapes.
    pub fn load_parameters(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let map: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if map.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters for a model with {}",
                map.len(),
                self.params.len()
            )));
        }
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let t = map
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != self.params.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}",
                    t.shape()
                )));
            }
            *self.params.get_mut(id) = (*t).clone();
        }
        Ok(())
    }

    /// Builds the per-mesh structures; jumpers are seeded by the model seed.
    pub fn context(&self, mesh: &MeshGraph) -> Result<MeshContext> {
        if mesh.dim() != self.dim {
            return Err(Error::Config(format!(
                "{}-d mesh for a {}-d model",
                mesh.dim(),
                self.dim
            )));
        }
        let geo = mesh.geometry();
        let jumpers = (self.config.jumpers_fraction * mesh.num_nodes() as f64).round() as usize;
        let attention_mesh = if jumpers > 0 && self.config.architecture == Architecture::Transformer
        {
            mesh.add_jumpers(jumpers, crate::rng::derive_seed(self.config.seed, &[8]))?
        } else {
            mesh.clone()
        };
        let attention = AttentionGraph::from_mesh(&attention_mesh, true);
        let h = if geo.mesh_size_h > 0.0 {
            geo.mesh_size_h
        } else {
            1.0
        };
        let rope = (self.config.pe == PeMode::Rope)
            .then(|| -> Result<_> {
                let cfg = RopeConfig::new(
                    self.dim,
                    self.config.width / self.config.heads,
                    h,
                    geo.diameter,
                )?;
                Ok(cfg.table(self.config.heads, &geo.centered_positions))
            })
            .transpose()?;
        Ok(MeshContext {
            mesh: mesh.clone(),
            attention,
            edges: MeshEdges::from_mesh(mesh),
            edge_features: edge_features(mesh).map(|x| x / h),
            rope,
            centered: Tensor::from_vec(mesh.num_nodes(), self.dim, geo.centered_positions)?,
        })
    }

    /// Normalized model input `N × p'`.
    pub fn input_tensor(&self, ctx: &MeshContext, features: &NodeFeatures) -> Result<Tensor> {
        let x = self.normalizer.normalize_inputs(&features.values)?;
        if !self.config.position_features {
            return Ok(x);
        }
        let n = x.rows();
        let (a, b) = (x.cols(), self.dim);
        let mut out = Tensor::zeros(n, a + b);
        for i in 0..n {
            out.row_mut(i)[..a].copy_from_slice(x.row(i));
            out.row_mut(i)[a..].copy_from_slice(ctx.centered.row(i));
        }
        Ok(out)
    }

    /// `Z^0 = E(x)`, plus the learned absolute embedding when enabled.
    pub fn encode<'t>(
        &self,
        p: &Bound<'t>,
        ctx: &MeshContext,
        features: &NodeFeatures,
    ) -> Result<Var<'t>> {
        let tape = p.vars().first().expect("model has parameters").tape();
        let x = tape.constant(self.input_tensor(ctx, features)?);
        let z = self.encoder.forward(p, x)?;
        match &self.abs_pe {
            Some(pe) => z.add(pe.forward(p, tape.constant(ctx.centered.clone()))?),
            None => Ok(z),
        }
    }

    pub fn decode<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.decoder.forward(p, z)
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        ctx: &MeshContext,
        features: &NodeFeatures,
    ) -> Result<Forward<'t>> {
        let tape = p.vars()[0].tape();
        let mut z = self.encode(p, ctx, features)?;
        let mut latents = vec![z];
        let mut corrected = Vec::new();
        let mut edge_latent = match &self.processor {
            Processor::Mgn { edge_encoder, .. } => {
                Some(edge_encoder.forward(p, tape.constant(ctx.edge_features.clone()))?)
            }
            _ => None,
        };
        for l in 0..self.config.layers {
            let z_pred = match &self.processor {
                Processor::Transformer(blocks) => {
                    blocks[l].forward(p, z, &ctx.attention, ctx.rope.as_ref())?
                }
                Processor::Transolver(blocks) => z.add(blocks[l].forward(p, z)?)?,
                Processor::Mgn { blocks, .. } => {
                    let (dz, e) =
                        blocks[l].forward(p, z, edge_latent.expect("edge latents"), &ctx.edges)?;
                    edge_latent = Some(e);
                    z.add(dz)?
                }
            };
            z = match &self.correctors[l] {
                Some(c) => {
                    let next = c.forward(p, z_pred, z, &ctx.attention, ctx.rope.as_ref())?;
                    corrected.push(next);
                    next
                }
                None => z_pred,
            };
            latents.push(z);
        }
        Ok(Forward {
            output: self.decode(p, z)?,
            latents,
            corrected,
        })
    }

    /// Normalized increments `(u_{t+1} − u_t) / scale` of the dynamical
    /// components between two `N × C` states.
    pub fn target_tensor(&self, current: &[f64], next: &[f64]) -> Result<Tensor> {
        let c = self.schema.len();
        let idx = self.schema.dynamical_indices();
        if current.len() != next.len() || current.len() % c != 0 {
            return Err(Error::shape(
                "target",
                "state lengths disagree with the schema",
            ));
        }
        let n = current.len() / c;
        let mut out = Tensor::zeros(n, idx.len());
        for i in 0..n {
            for (k, &ci) in idx.iter().enumerate() {
                out.set(
                    i,
                    k,
                    (next[i * c + ci] - current[i * c + ci]) / self.normalizer.target_scale[k],
                );
            }
        }
        Ok(out)
    }

    /// Next `N × C` state from the current one and normalized increments;
    /// non-dynamical components are copied from `current`.
    pub fn apply_increment(&self, current: &[f64], output: &Tensor) -> Vec<f64> {
        let c = self.schema.len();
        let mut next = current.to_vec();
        for (k, &ci) in self.schema.dynamical_indices().iter().enumerate() {
            for i in 0..output.rows() {
                next[i * c + ci] += output.get(i, k) * self.normalizer.target_scale[k];
            }
        }
        next
    }
}

/// Parameter count of a model built from `config`.
pub fn parameter_count(config: &ModelConfig, schema: &FieldSchema, dim: usize) -> Result<usize> {
    let layout = FeatureLayout::new(schema, config.history);
    let norm = Normalizer::identity(layout.width(), schema.dynamical_indices().len());
    Ok(Model::new(config.clone(), schema.clone(), dim, norm)?.num_parameters())
}

/// Relative gap `|a − b| / b`.
pub fn relative_gap(a: usize, b: usize) -> f64 {
    (a as f64 - b as f64).abs() / b.max(1) as f64
}

/// The plain version of `config`, widened so its parameter count matches
/// `target` within `tolerance` (relative).
///
/// The width grows in multiples of the head count with the default MLP
/// size; if the closest width misses the tolerance, the MLP hidden size of
/// that width is solved from the affine dependence of the count on it.
pub fn param_matched_plain(
    config: &ModelConfig,
    schema: &FieldSchema,
    dim: usize,
    target: usize,
    tolerance: f64,
) -> Result<ModelConfig> {
    let base = ModelConfig {
        mlp_hidden: None,
        ..config.plain()
    };
    let with = |width: usize, mlp_hidden: Option<usize>| ModelConfig {
        width,
        mlp_hidden,
        ..base.clone()
    };
    let mut width = base.width.max(base.heads);
    let mut prev: Option<(usize, usize)> = None;
    let (width, count) = loop {
        let count = parameter_count(&with(width, None), schema, dim)?;
        if count >= target {
            break match prev {
                Some((w, c)) if target - c < count - target => (w, c),
                _ => (width, count),
            };
        }
        prev = Some((width, count));
        width += base.heads;
    };
    if relative_gap(count, target) <= tolerance {
        return Ok(with(width, None));
    }
    let c1 = parameter_count(&with(width, Some(width)), schema, dim)? as f64;
    let c2 = parameter_count(&with(width, Some(2 * width)), schema, dim)? as f64;
    let slope = (c2 - c1) / width as f64;
    let hidden = (width as f64 + (target as f64 - c1) / slope)
        .round()
        .max(1.0) as usize;
    let cfg = with(width, Some(hidden));
    let count = parameter_count(&cfg, schema, dim)?;
    if relative_gap(count, target) > tolerance {
        return Err(Error::Config(format!(
            "closest plain model has {count} parameters, {target} requested"
        )));
    }
    Ok(cfg)
}
