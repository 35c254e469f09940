//! Spatial building blocks recorded on an autodiff tape.

mod attention;
mod mgn;
mod rope;
mod transformer;
mod transolver;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use attention::{
    dense_attention, full_attention, sparse_attention, AttentionGraph, AttentionLayer,
    MaskSemantics, PeMode,
};
pub use mgn::{edge_features, MeshEdges, MgnBlock};
pub use rope::RopeConfig;
pub use transformer::TransformerBlock;
pub use transolver::TransolverBlock;

use crate::autodiff::{Bound, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Initialization scheme of a weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / fan_in)`.
    He,
    Zero,
}

fn init_matrix(rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(rows, cols),
        Init::He => {
            let bound = (6.0 / rows.max(1) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::from_vec(rows, cols, data).expect("matrix shape")
        }
    }
}

/// Affine map `x W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_matrix(fan_in, fan_out, init, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, fan_out)));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if x.cols() != self.fan_in {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {}x{} for a {}-input layer",
                    x.rows(),
                    x.cols(),
                    self.fan_in
                ),
            ));
        }
        let y = x.matmul(p.var(self.w))?;
        match self.b {
            Some(b) => y.add_row(p.var(b)),
            None => Ok(y),
        }
    }
}

/// Two affine layers with a SiLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        last_init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            first: Linear::new(
                store,
                &format!("{name}.0"),
                dims[0],
                dims[1],
                true,
                Init::He,
                rng,
            ),
            second: Linear::new(
                store,
                &format!("{name}.1"),
                dims[1],
                dims[2],
                true,
                last_init,
                rng,
            ),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.first.forward(p, x)?.silu();
        self.second.forward(p, h)
    }

    pub fn in_dim(&self) -> usize {
        self.first.fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.second.fan_out
    }
}

pub const RMS_EPS: f64 = 1e-8;

/// `x / rms(x) * scale` per row.
#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub scale: ParamId,
    pub width: usize,
}

impl RmsNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Tensor::full(1, width, 1.0)),
            width,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        rms_normalize(x)?.mul_row(p.var(self.scale))
    }
}

/// Row-wise division by the root mean square, without learned scale.
pub fn rms_normalize(x: Var<'_>) -> Result<Var<'_>> {
    let inv = x.square().mean_cols().add_scalar(RMS_EPS).rsqrt();
    x.mul_col(inv)
}

/// `W_o (silu(x W_g) ⊙ x W_v)`.
#[derive(Clone, Debug)]
pub struct GatedMlp {
    pub gate: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl GatedMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            gate: Linear::new(
                store,
                &format!("{name}.gate"),
                width,
                hidden,
                true,
                Init::He,
                rng,
            ),
            value: Linear::new(
                store,
                &format!("{name}.value"),
                width,
                hidden,
                true,
                Init::He,
                rng,
            ),
            out: Linear::new(
                store,
                &format!("{name}.out"),
                hidden,
                width,
                true,
                Init::He,
                rng,
            ),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let g = self.gate.forward(p, x)?.silu();
        let v = self.value.forward(p, x)?;
        self.out.forward(p, g.mul(v)?)
    }
}
