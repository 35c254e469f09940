use std::f64::consts::PI;
use std::rc::Rc;

use crate::autodiff::RotationTable;
use crate::error::{Error, Result};

/// Axis-wise rotary encoding of one attention head.
///
/// Channel pair `p` (channels `2p, 2p+1`) belongs to axis `p mod dim` and
/// rotates with frequency `freqs[p / dim]`; pairs beyond `dim · freqs.len()`
/// pass through unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    pub dim: usize,
    pub head_width: usize,
    /// Strictly decreasing angular frequencies in radians per meter.
    pub freqs: Vec<f64>,
}

impl RopeConfig {
    /// Geometric frequencies from `2π/h` down to `2π/diameter`.
    pub fn new(dim: usize, head_width: usize, mesh_size: f64, diameter: f64) -> Result<Self> {
        let r = Self::ranks(dim, head_width)?;
        let w_max = 2.0 * PI / mesh_size;
        let w_min = 2.0 * PI / diameter.max(mesh_size);
        let gamma = if r > 1 {
            let g = (w_min / w_max).powf(1.0 / (r - 1) as f64);
            if g < 1.0 {
                g
            } else {
                0.5
            }
        } else {
            1.0
        };
        let freqs = (0..r).map(|k| w_max * gamma.powi(k as i32)).collect();
        Self::with_frequencies(dim, head_width, freqs)
    }

    pub fn with_frequencies(dim: usize, head_width: usize, freqs: Vec<f64>) -> Result<Self> {
        let r = Self::ranks(dim, head_width)?;
        if freqs.is_empty() || freqs.len() > r {
            return Err(Error::Config(format!(
                "{} rotary frequencies for at most {r} per axis",
                freqs.len()
            )));
        }
        if freqs.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(
                "rotary frequencies must be strictly decreasing".into(),
            ));
        }
        Ok(Self {
            dim,
            head_width,
            freqs,
        })
    }

    fn ranks(dim: usize, head_width: usize) -> Result<usize> {
        if dim == 0 || dim > 3 {
            return Err(Error::Config(format!(
                "rotary dimension {dim} not in 1..=3"
            )));
        }
        let r = head_width / (2 * dim);
        if r == 0 {
            return Err(Error::Config(format!(
                "head width {head_width} too small for {dim}-axis rotary encoding"
            )));
        }
        Ok(r)
    }

    /// Pair indices assigned to `axis`, in frequency order.
    pub fn axis_pairs(&self, axis: usize) -> Vec<usize> {
        (0..self.freqs.len()).map(|r| r * self.dim + axis).collect()
    }

    /// Rotation table for `heads` heads of `N` nodes with centered
    /// coordinates `N × dim` row-major.
    pub fn table(&self, heads: usize, centered: &[f64]) -> Rc<RotationTable> {
        let n = centered.len() / self.dim;
        let used = self.freqs.len() * self.dim;
        let mut pairs = Vec::with_capacity(heads * used);
        for h in 0..heads {
            for p in 0..used {
                let c = h * self.head_width + 2 * p;
                pairs.push((c, c + 1));
            }
        }
        let per_row = pairs.len();
        let mut cos = Vec::with_capacity(n * per_row);
        let mut sin = Vec::with_capacity(n * per_row);
        for i in 0..n {
            for _ in 0..heads {
                for p in 0..used {
                    let angle = self.freqs[p / self.dim] * centered[i * self.dim + p % self.dim];
                    cos.push(angle.cos());
                    sin.push(angle.sin());
                }
            }
        }
        Rc::new(RotationTable {
            pairs,
            cos,
            sin,
            rows: n,
        })
    }
}
