use rand_chacha::ChaCha8Rng;

use super::{AttentionLayer, GatedMlp, Init, MaskSemantics, Mlp, PeMode, RmsNorm};
use crate::autodiff::{Bound, ParamStore, Var};
use crate::error::{Error, Result};

/// Physics-slice attention block.
///
/// Nodes are softly assigned to `M` slices, slice tokens are the weighted
/// means of node latents, slices attend to one another, and each node reads
/// back the weighted sum of attended slices. The increment is
/// `a + GatedMlp(norm(Z + a))` with `a` the slice attention of `norm(Z)`.
#[derive(Clone, Debug)]
pub struct TransolverBlock {
    pub norm1: RmsNorm,
    pub slice_mlp: Mlp,
    pub attention: AttentionLayer,
    pub norm2: RmsNorm,
    pub mlp: GatedMlp,
    pub num_slices: usize,
}

impl TransolverBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        num_slices: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_slices == 0 {
            return Err(Error::Config("transolver needs at least one slice".into()));
        }
        Ok(Self {
            norm1: RmsNorm::new(store, &format!("{name}.norm1"), width),
            slice_mlp: Mlp::new(
                store,
                &format!("{name}.slice"),
                [width, hidden, num_slices],
                Init::He,
                rng,
            ),
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
            num_slices,
        })
    }

    /// `N × M` slice weights, each row a distribution.
    pub fn slice_weights<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.slice_mlp.forward(p, x)?.softmax_rows())
    }

    /// Slice attention without normalization or residual.
    pub fn slice_attention<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.slice_weights(p, x)?;
        let mass = w.sum_rows().transpose().recip();
        let tokens = w.transpose().matmul(x)?.mul_col(mass)?;
        let attended = self.attention.forward_full(p, tokens)?;
        w.matmul(attended)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let a = self.slice_attention(p, self.norm1.forward(p, z)?)?;
        let m = self.mlp.forward(p, self.norm2.forward(p, z.add(a)?)?)?;
        a.add(m)
    }
}
