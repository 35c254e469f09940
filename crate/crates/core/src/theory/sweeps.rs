//! Convergence sweeps for the WLS gradient and the discrete-H¹ error bound.

use std::f64::consts::PI;

use delaunator::{triangulate, Point};
use rand::Rng;
use serde::Serialize;

use super::wls::{WlsStencil, WlsWeighting};
use crate::data::generate_mesh;
use crate::error::{Error, Result};
use crate::mesh::{MeshGraph, NodeType};
use crate::rng::stream;

/// Delaunay triangulation of a jittered `h`-spaced grid on the unit square.
///
/// Interior points move by up to `jitter·h` per axis; boundary points slide
/// only along their side, corners stay fixed.
pub fn jittered_grid_mesh(h: f64, jitter: f64, seed: u64) -> Result<MeshGraph> {
    let n = (1.0 / h).round() as usize;
    if n < 2 || (n as f64 * h - 1.0).abs() > 1e-9 {
        return Err(Error::Mesh(format!(
            "spacing {h} does not divide the unit square"
        )));
    }
    if !(0.0..0.5).contains(&jitter) {
        return Err(Error::Mesh(format!("jitter {jitter} must be in [0, 0.5)")));
    }
    let mut rng = stream(seed, &[]);
    let mut pts = Vec::with_capacity((n + 1) * (n + 1));
    let mut types = Vec::with_capacity(pts.capacity());
    for a in 0..=n {
        for b in 0..=n {
            let edge_x = a == 0 || a == n;
            let edge_y = b == 0 || b == n;
            let mut dx = rng.random_range(-jitter..=jitter) * h;
            let mut dy = rng.random_range(-jitter..=jitter) * h;
            if edge_x {
                dx = 0.0;
            }
            if edge_y {
                dy = 0.0;
            }
            pts.push([a as f64 * h + dx, b as f64 * h + dy]);
            types.push(if edge_x || edge_y {
                NodeType::Wall
            } else {
                NodeType::Normal
            });
        }
    }
    let tri = triangulate(
        &pts.iter()
            .map(|p| Point { x: p[0], y: p[1] })
            .collect::<Vec<_>>(),
    );
    let mut pairs = Vec::with_capacity(tri.triangles.len());
    for t in tri.triangles.chunks_exact(3) {
        pairs.extend([(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]);
    }
    MeshGraph::from_pairs(2, pts.into_iter().flatten().collect(), &pairs, types)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Largest WLS gradient error over every stencil of a mesh for random affine fields.
pub fn affine_exactness(
    mesh: &MeshGraph,
    weighting: WlsWeighting,
    fields: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream(seed, &[]);
    let dim = mesh.dim();
    let stencils: Vec<WlsStencil> = (0..mesh.num_nodes())
        .map(|i| WlsStencil::from_mesh(mesh, i, weighting, None))
        .collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    for _ in 0..fields {
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b = rng.random_range(-5.0..5.0);
        let f = |x: &[f64]| x.iter().zip(&a).map(|(x, a)| x * a).sum::<f64>() + b;
        for (i, s) in stencils.iter().enumerate() {
            let center = f(mesh.position(i));
            let nb: Vec<f64> = mesh
                .neighborhood(i)?
                .iter()
                .map(|&j| f(mesh.position(j)))
                .collect();
            let g = super::wls::wls_gradient(center, &nb, s)?;
            for (g, a) in g.iter().zip(&a) {
                worst = worst.max((g - a).abs());
            }
        }
    }
    Ok(worst)
}

/// Largest gradient error of a fixed quadratic on each mesh stencil rescaled
/// to size `h`, per entry of `hs`.
pub fn quadratic_gradient_errors(mesh: &MeshGraph, hs: &[f64]) -> Result<Vec<f64>> {
    let base = mesh.geometry().mesh_size_h;
    let u =
        |x: &[f64]| 1.3 * x[0] * x[0] - 0.7 * x[0] * x[1] + 0.4 * x[1] * x[1] + 0.2 * x[0] - x[1];
    let grad = |x: &[f64]| {
        [
            2.6 * x[0] - 0.7 * x[1] + 0.2,
            -0.7 * x[0] + 0.8 * x[1] - 1.0,
        ]
    };
    hs.iter()
        .map(|&h| {
            let scale = h / base;
            let mut worst = 0.0f64;
            for i in 0..mesh.num_nodes() {
                let xi = mesh.position(i);
                let offsets: Vec<Vec<f64>> = mesh
                    .neighborhood(i)?
                    .iter()
                    .map(|&j| {
                        mesh.position(j)
                            .iter()
                            .zip(xi)
                            .map(|(p, q)| (p - q) * scale)
                            .collect()
                    })
                    .collect();
                let s = WlsStencil::new(&offsets, WlsWeighting::Uniform, Some(h))?;
                let nb: Vec<f64> = offsets
                    .iter()
                    .map(|o| u(&[xi[0] + o[0], xi[1] + o[1]]))
                    .collect();
                let g = super::wls::wls_gradient(u(xi), &nb, &s)?;
                let t = grad(xi);
                worst = worst.max(((g[0] - t[0]).powi(2) + (g[1] - t[1]).powi(2)).sqrt());
            }
            Ok(worst)
        })
        .collect()
}

/// One cell of the discrete-H¹ sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub h: f64,
    pub epsilon: f64,
    /// Mean squared WLS-gradient error of the perturbed field.
    pub lhs: f64,
    /// `ε²/h² + h²`.
    pub rhs_shape: f64,
    /// `lhs / rhs_shape`.
    pub constant: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
    /// Log-log slope of the unperturbed LHS in `h`.
    pub consistency_slope: f64,
    /// Largest LHS ratio when `ε` doubles at fixed `h`.
    pub max_doubling_ratio: f64,
    /// `max C / min C` over cells.
    pub constant_spread: f64,
    /// Unperturbed LHS for an affine field on the finest mesh.
    pub linear_lhs: f64,
}

/// Mean over nodes of `‖∇_h v − ∇u‖²` where `v` samples `u` on the mesh.
pub fn mean_squared_gradient_error(
    mesh: &MeshGraph,
    values: &[f64],
    exact: impl Fn(&[f64]) -> [f64; 2],
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..mesh.num_nodes() {
        let s = WlsStencil::from_mesh(mesh, i, WlsWeighting::Uniform, None)?;
        let nb: Vec<f64> = mesh.neighborhood(i)?.iter().map(|&j| values[j]).collect();
        let g = super::wls::wls_gradient(values[i], &nb, &s)?;
        let t = exact(mesh.position(i));
        total += (g[0] - t[0]).powi(2) + (g[1] - t[1]).powi(2);
    }
    Ok(total / mesh.num_nodes() as f64)
}

/// `u = sin(πx) sin(πy)` sampled with node perturbations `ε η_i`,
/// `η_i ~ U[−1, 1]`, over every `(h, ε)` pair. `epsilons` should be sorted
/// and contain successive doublings for the ratio check.
pub fn h1_bound_sweep(hs: &[f64], epsilons: &[f64], jitter: f64, seed: u64) -> Result<BoundReport> {
    let u = |x: &[f64]| (PI * x[0]).sin() * (PI * x[1]).sin();
    let du = |x: &[f64]| {
        [
            PI * (PI * x[0]).cos() * (PI * x[1]).sin(),
            PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
        ]
    };
    let mut rows = Vec::new();
    let mut clean = Vec::new();
    let mut max_ratio = 0.0f64;
    let mut linear_lhs = 0.0;
    for (k, &h) in hs.iter().enumerate() {
        let mesh = jittered_grid_mesh(h, jitter, crate::rng::derive_seed(seed, &[k as u64]))?;
        let mut rng = stream(seed, &[k as u64, 1]);
        let eta: Vec<f64> = (0..mesh.num_nodes())
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        let truth: Vec<f64> = (0..mesh.num_nodes()).map(|i| u(mesh.position(i))).collect();
        let mut prev: Option<(f64, f64)> = None;
        for &eps in epsilons {
            let values: Vec<f64> = truth.iter().zip(&eta).map(|(t, e)| t + eps * e).collect();
            let lhs = mean_squared_gradient_error(&mesh, &values, du)?;
            let rhs_shape = eps * eps / (h * h) + h * h;
            if eps == 0.0 {
                clean.push(lhs);
            }
            if let Some((pe, pl)) = prev {
                if pe > 0.0 && (eps / pe - 2.0).abs() < 1e-12 {
                    max_ratio = max_ratio.max(lhs / pl);
                }
            }
            prev = Some((eps, lhs));
            rows.push(BoundRow {
                h,
                epsilon: eps,
                lhs,
                rhs_shape,
                constant: lhs / rhs_shape,
            });
        }
        if k + 1 == hs.len() {
            let lin: Vec<f64> = (0..mesh.num_nodes())
                .map(|i| {
                    let p = mesh.position(i);
                    0.8 * p[0] - 1.7 * p[1] + 0.3
                })
                .collect();
            linear_lhs = mean_squared_gradient_error(&mesh, &lin, |_| [0.8, -1.7])?;
        }
    }
    let consts: Vec<f64> = rows.iter().map(|r| r.constant).collect();
    let spread = consts.iter().copied().fold(0.0, f64::max)
        / consts.iter().copied().fold(f64::INFINITY, f64::min);
    let consistency_slope = if clean.len() == hs.len() && hs.len() >= 2 {
        loglog_slope(hs, &clean)
    } else {
        f64::NAN
    };
    Ok(BoundReport {
        rows,
        consistency_slope,
        max_doubling_ratio: max_ratio,
        constant_spread: spread,
        linear_lhs,
    })
}

/// Spectral-bound statistics over every stencil of a generated mesh.
pub fn assumption_sweep(num_points: usize, seed: u64) -> Result<(f64, f64, usize)> {
    let mesh = generate_mesh(num_points, seed)?;
    let h = mesh.geometry().mesh_size_h;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut failures = 0;
    for i in 0..mesh.num_nodes() {
        let a = WlsStencil::from_mesh(&mesh, i, WlsWeighting::Uniform, Some(h))?.check_assumption();
        lo = lo.min(a.c0_hat);
        hi = hi.max(a.c1_hat);
        failures += usize::from(!a.satisfied);
    }
    Ok((lo, hi, failures))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [0.1, 0.05, 0.025];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powi(2)).collect();
        assert!((loglog_slope(&x, &y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn jittered_grid_is_valid() {
        let m = jittered_grid_mesh(0.1, 0.25, 1).unwrap();
        assert_eq!(m.num_nodes(), 121);
        let e = (m.num_edges() / 2) as i64;
        assert!(e >= 3 * 100 + 20, "{e}");
        assert!(jittered_grid_mesh(0.3, 0.2, 1).is_err());
        assert!(jittered_grid_mesh(0.1, 0.6, 1).is_err());
    }

    #[test]
    fn affine_fields_are_exact() {
        let m = generate_mesh(150, 3).unwrap();
        for w in [WlsWeighting::Uniform, WlsWeighting::InverseDistance] {
            assert!(affine_exactness(&m, w, 5, 1).unwrap() < 1e-10);
        }
    }

    #[test]
    fn quadratic_error_is_first_order() {
        let m = generate_mesh(150, 3).unwrap();
        let hs = [0.1, 0.05, 0.025];
        let err = quadratic_gradient_errors(&m, &hs).unwrap();
        assert!(loglog_slope(&hs, &err) >= 0.9, "{err:?}");
    }

    #[test]
    fn bound_sweep_on_small_grid() {
        let r = h1_bound_sweep(&[0.1, 0.05], &[0.0, 1e-3, 2e-3], 0.25, 2).unwrap();
        assert_eq!(r.rows.len(), 6);
        assert!(r.linear_lhs < 1e-20);
        assert!(r.max_doubling_ratio <= 4.0 * 1.1);
        assert!(r.consistency_slope > 1.5, "{}", r.consistency_slope);
    }

    #[test]
    fn generated_meshes_satisfy_spectral_bounds() {
        let (lo, hi, fails) = assumption_sweep(300, 5).unwrap();
        assert_eq!(fails, 0);
        assert!(lo > 1e-3 && hi <= 1.0, "{lo} {hi}");
    }
}
