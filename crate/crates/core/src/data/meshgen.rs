use delaunator::{triangulate, Point};
use rand::Rng;

use crate::error::{Error, Result};
use crate::mesh::{MeshGraph, NodeType};
use crate::rng::stream;

const CANDIDATES: usize = 12;

/// Triangulates `num_points` points in the unit square.
///
/// Boundary points are evenly spaced along the four sides; the interior is
/// filled by best-candidate sampling. The left side is `Inflow`, the right
/// side `Outflow`, top, bottom and corners `Wall`.
pub fn generate_mesh(num_points: usize, seed: u64) -> Result<MeshGraph> {
    if num_points < 4 {
        return Err(Error::Mesh(format!(
            "need at least 4 points, got {num_points}"
        )));
    }
    let per_side = ((num_points as f64).sqrt().round() as usize)
        .saturating_sub(1)
        .clamp(1, num_points / 4);
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(num_points);
    let mut types = Vec::with_capacity(num_points);
    let s = per_side as f64;
    for k in 0..per_side {
        let f = k as f64 / s;
        let side = |t: NodeType| if k == 0 { NodeType::Wall } else { t };
        pts.push([f, 0.0]);
        types.push(NodeType::Wall);
        pts.push([1.0, f]);
        types.push(side(NodeType::Outflow));
        pts.push([1.0 - f, 1.0]);
        types.push(NodeType::Wall);
        pts.push([0.0, 1.0 - f]);
        types.push(side(NodeType::Inflow));
    }
    let margin = 0.3 / s;
    let mut rng = stream(seed, &[]);
    while pts.len() < num_points {
        let mut best = [0.0; 2];
        let mut best_d = -1.0;
        for _ in 0..CANDIDATES {
            let c = [
                rng.random_range(margin..1.0 - margin),
                rng.random_range(margin..1.0 - margin),
            ];
            let d = pts
                .iter()
                .map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = c;
            }
        }
        pts.push(best);
        types.push(NodeType::Normal);
    }
    let points: Vec<Point> = pts.iter().map(|p| Point { x: p[0], y: p[1] }).collect();
    let tri = triangulate(&points);
    let mut triangles = Vec::with_capacity(tri.triangles.len() / 3);
    let mut used = vec![false; num_points];
    let mut pairs = Vec::with_capacity(tri.triangles.len());
    for t in tri.triangles.chunks_exact(3) {
        let [a, b, c] = [t[0], t[1], t[2]];
        let area = 0.5
            * ((pts[b][0] - pts[a][0]) * (pts[c][1] - pts[a][1])
                - (pts[c][0] - pts[a][0]) * (pts[b][1] - pts[a][1]));
        if area.abs() < 1e-14 {
            return Err(Error::Mesh(format!("degenerate triangle ({a}, {b}, {c})")));
        }
        for v in [a, b, c] {
            used[v] = true;
        }
        pairs.extend([(a, b), (b, c), (c, a)]);
        triangles.push([a, b, c]);
    }
    if let Some(unused) = used.iter().position(|u| !u) {
        return Err(Error::Mesh(format!(
            "point {unused} is not part of the triangulation"
        )));
    }
    let positions = pts.iter().flat_map(|p| p.iter().copied()).collect();
    Ok(MeshGraph::from_pairs(2, positions, &pairs, types)?.with_triangles(triangles))
}
