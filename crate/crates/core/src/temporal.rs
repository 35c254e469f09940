//! Predictor-corrector layers: a spatial residual predictor followed by a
//! gated cross-attention corrector and a mixing MLP.

use std::rc::Rc;

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Precision, RotationTable, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionGraph, AttentionLayer, Init, MaskSemantics, Mlp, PeMode};

/// Final activation of the gate network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Elementwise logistic gate in `[0, 1]`.
    #[default]
    Sigmoid,
    /// Softmax over the node axis, per channel.
    NodeSoftmax,
}

/// Which processor layers carry a corrector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorFrequency {
    #[default]
    EveryLayer,
    LastLayerOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    pub enabled: bool,
    pub frequency: CorrectorFrequency,
    pub gate_mode: GateMode,
    /// Ablation switches for the gated attention and mixer branches.
    pub gate: bool,
    pub mixer: bool,
    /// Decode and supervise the state after every corrector.
    pub intermediate_supervision: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            frequency: CorrectorFrequency::EveryLayer,
            gate_mode: GateMode::Sigmoid,
            gate: true,
            mixer: true,
            intermediate_supervision: false,
        }
    }
}

impl TemporalConfig {
    /// Whether processor layer `layer` of `depth` gets a corrector.
    pub fn corrects(&self, layer: usize, depth: usize) -> bool {
        self.enabled
            && match self.frequency {
                CorrectorFrequency::EveryLayer => true,
                CorrectorFrequency::LastLayerOnly => layer + 1 == depth,
            }
    }
}

/// `Z̃ = Z + φ(Z)`.
pub fn predictor<'t>(z: Var<'t>, spatial_increment: Var<'t>) -> Result<Var<'t>> {
    z.add(spatial_increment)
}

/// `Z' = Z + G(C) ⊙ CA(Z̃, Z) + M(C)` with `C = [Z̃, Z]`.
#[derive(Clone, Debug)]
pub struct Corrector {
    pub gate: Option<Mlp>,
    pub attention: Option<AttentionLayer>,
    pub mixer: Option<Mlp>,
    pub gate_mode: GateMode,
}

impl Corrector {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        pe: PeMode,
        dim: usize,
        cfg: &TemporalConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let attention = cfg
            .gate
            .then(|| {
                AttentionLayer::new(
                    store,
                    &format!("{name}.ca"),
                    width,
                    heads,
                    pe,
                    dim,
                    MaskSemantics::Additive,
                    rng,
                )
            })
            .transpose()?;
        let gate = cfg.gate.then(|| {
            Mlp::new(
                store,
                &format!("{name}.gate"),
                [2 * width, hidden, width],
                Init::Zero,
                rng,
            )
        });
        let mixer = cfg.mixer.then(|| {
            Mlp::new(
                store,
                &format!("{name}.mixer"),
                [2 * width, hidden, width],
                Init::He,
                rng,
            )
        });
        Ok(Self {
            gate,
            attention,
            mixer,
            gate_mode: cfg.gate_mode,
        })
    }

    /// Gate activations `G(C)`, `N × d`.
    pub fn gate_values<'t>(&self, p: &Bound<'t>, context: Var<'t>) -> Result<Option<Var<'t>>> {
        let Some(gate) = &self.gate else {
            return Ok(None);
        };
        let logits = gate.forward(p, context)?;
        Ok(Some(match self.gate_mode {
            GateMode::Sigmoid => logits.sigmoid(),
            GateMode::NodeSoftmax => logits.softmax_cols(),
        }))
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        z_pred: Var<'t>,
        z: Var<'t>,
        graph: &AttentionGraph,
        rope: Option<&Rc<RotationTable>>,
    ) -> Result<Var<'t>> {
        if z_pred.shape() != z.shape() {
            return Err(Error::shape(
                "corrector",
                format!("predicted {:?} vs current {:?}", z_pred.shape(), z.shape()),
            ));
        }
        let context = z.tape().concat_cols(&[z_pred, z])?;
        let mut out = z;
        if let (Some(g), Some(att)) = (self.gate_values(p, context)?, &self.attention) {
            let ca = att.forward(p, z_pred, z, graph, rope)?;
            out = out.add(g.mul(ca)?)?;
        }
        if let Some(m) = &self.mixer {
            out = out.add(m.forward(p, context)?)?;
        }
        Ok(out)
    }
}

/// `R_θ(z) = (1 + (1 − θ) z) / (1 − θ z)`.
pub fn theta_amplification(theta: f64, z: Complex64) -> Result<Complex64> {
    let den = 1.0 - theta * z;
    if den.norm() == 0.0 {
        return Err(Error::Pole {
            theta,
            re: z.re,
            im: z.im,
        });
    }
    Ok((1.0 + (1.0 - theta) * z) / den)
}

/// Gate logit used for `θ`; `θ ∈ {0, 1}` saturates the logistic exactly in
/// double precision.
const GATE_SATURATION: f64 = 40.0;

/// One predictor-corrector step applied to the scalar linear system
/// `y' = λ y` with `z = Δt λ`, using analytically chosen weights.
///
/// The complex state `y` is stored as the two real channels of a one-node
/// latent. The predictor is forward Euler, `ỹ = (1 + z) y`. The gate is the
/// constant `θ`, the single-key cross-attention returns `z R_θ(z) y` (the
/// implicit term `z y_{n+1}`), and the mixer returns `(1 − θ)(ỹ − y)`
/// through the identity `silu(a) − silu(−a) = a`. The block output is
/// therefore `y + θ z R y + (1 − θ) z y = R_θ(z) y`. Returns the measured
/// amplification `y_{n+1} / y_n` for `y_n = 1`.
pub fn theta_method_emulation(z: Complex64, theta: f64) -> Result<Complex64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Infeasible(format!(
            "gate cannot represent theta = {theta} outside [0, 1]"
        )));
    }
    let r = theta_amplification(theta, z)?;
    let logit = if theta <= 0.0 {
        -GATE_SATURATION
    } else if theta >= 1.0 {
        GATE_SATURATION
    } else {
        (theta / (1.0 - theta)).ln()
    };
    if (1.0 / (1.0 + (-logit).exp()) - theta).abs() > 1e-15 {
        return Err(Error::Infeasible(format!(
            "gate logit {logit} does not reproduce theta = {theta}"
        )));
    }

    let mut store = ParamStore::new();
    let cfg = TemporalConfig::default();
    let mut rng = crate::rng::stream(0, &[]);
    let spatial = crate::nn::Linear::new(&mut store, "spatial", 2, 2, false, Init::Zero, &mut rng);
    let corrector = Corrector::new(&mut store, "c", 2, 1, 4, PeMode::None, 2, &cfg, &mut rng)?;
    let (gate, attention, mixer) = (
        corrector.gate.as_ref().expect("gate branch"),
        corrector.attention.as_ref().expect("attention branch"),
        corrector.mixer.as_ref().expect("mixer branch"),
    );
    store
        .tensors_mut()
        .iter_mut()
        .for_each(|t| t.data_mut().fill(0.0));

    // Row-vector convention: multiplication by w = a + ib is [[a, b], [−b, a]].
    let complex_mul = |w: Complex64| Tensor::from_rows(&[vec![w.re, w.im], vec![-w.im, w.re]]);
    *store.get_mut(spatial.w) = complex_mul(z)?;
    *store.get_mut(gate.second.b.expect("gate bias")) = Tensor::full(1, 2, logit);
    *store.get_mut(attention.v.w) = Tensor::identity(2);
    *store.get_mut(attention.o.w) = complex_mul(z * r)?;
    // Hidden units [u, −u] with u = (1 − θ)(ỹ − y), read from C = [ỹ, y].
    let c = 1.0 - theta;
    let mut first = Tensor::zeros(4, 4);
    for ch in 0..2 {
        first.set(ch, ch, c);
        first.set(2 + ch, ch, -c);
        first.set(ch, 2 + ch, -c);
        first.set(2 + ch, 2 + ch, c);
    }
    *store.get_mut(mixer.first.w) = first;
    let mut second = Tensor::zeros(4, 2);
    for ch in 0..2 {
        second.set(ch, ch, 1.0);
        second.set(2 + ch, ch, -1.0);
    }
    *store.get_mut(mixer.second.w) = second;

    let tape = Tape::with_precision(Precision::F64);
    let p = store.bind_constant(&tape);
    let y = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]])?);
    let y_pred = predictor(y, spatial.forward(&p, y)?)?;
    let graph = AttentionGraph::from_index_lists(&[vec![0]]);
    let out = corrector.forward(&p, y_pred, y, &graph, None)?.value();
    Ok(Complex64::new(out.get(0, 0), out.get(0, 1)))
}
