use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::{AttentionGraph, AttentionLayer, GatedMlp, MaskSemantics, PeMode, RmsNorm};
use crate::autodiff::{Bound, ParamStore, RotationTable, Var};
use crate::error::Result;

/// Post-norm neighbor-attention layer:
/// `Z' = RMSNorm(MHA(Z) + Z)`, `Z_out = RMSNorm(GatedMLP(Z') + Z')`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attention: AttentionLayer,
    pub norm1: RmsNorm,
    pub mlp: GatedMlp,
    pub norm2: RmsNorm,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        pe: PeMode,
        dim: usize,
        semantics: MaskSemantics,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionLayer::new(
                store,
                &format!("{name}.attn"),
                width,
                heads,
                pe,
                dim,
                semantics,
                rng,
            )?,
            norm1: RmsNorm::new(store, &format!("{name}.norm1"), width),
            mlp: GatedMlp::new(store, &format!("{name}.mlp"), width, hidden, rng),
            norm2: RmsNorm::new(store, &format!("{name}.norm2"), width),
        })
    }

    /// Layer output `Z_out`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        z: Var<'t>,
        graph: &AttentionGraph,
        rope: Option<&Rc<RotationTable>>,
    ) -> Result<Var<'t>> {
        let a = self.attention.forward(p, z, z, graph, rope)?;
        let z1 = self.norm1.forward(p, a.add(z)?)?;
        self.norm2.forward(p, self.mlp.forward(p, z1)?.add(z1)?)
    }
}
