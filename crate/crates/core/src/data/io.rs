//! Binary trajectory files.
//!
//! Layout, all numbers little-endian:
//! `"MRT1"`, byte-order flag `1`, version `1`, two zero bytes;
//! `u64` counts `dim, N, E, F, T, C`; `f64` time step;
//! `f64` positions `N·dim`; `u8` node types `N`; `u64` directed edges `2E`;
//! `u64` triangles `3F`; per component a `u8` dynamical flag, a `u32` name
//! length and the UTF-8 name; `f32` states `T·N·C`.

use std::fs;
use std::path::Path;

use super::{FieldSchema, Trajectory};
use crate::error::{Error, Result};
use crate::mesh::{MeshGraph, NodeType};

const MAGIC: &[u8; 4] = b"MRT1";
const LITTLE_ENDIAN: u8 = 1;
const VERSION: u8 = 1;

pub fn encode_trajectory(traj: &Trajectory) -> Vec<u8> {
    let mesh = &traj.mesh;
    let mut out = Vec::with_capacity(64 + traj.states.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[LITTLE_ENDIAN, VERSION, 0, 0]);
    for v in [
        mesh.dim(),
        mesh.num_nodes(),
        mesh.num_edges(),
        mesh.triangles().len(),
        traj.num_steps,
        traj.num_components(),
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&traj.delta_t.to_le_bytes());
    for x in mesh.positions() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend(mesh.node_types().iter().map(|t| *t as u8));
    for &(s, r) in mesh.edges() {
        out.extend_from_slice(&(s as u64).to_le_bytes());
        out.extend_from_slice(&(r as u64).to_le_bytes());
    }
    for t in mesh.triangles() {
        for &v in t {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
    }
    for (name, &dynamical) in traj.schema.names.iter().zip(&traj.schema.dynamical) {
        out.push(dynamical as u8);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for x in &traj.states {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::FilePayload(format!(
                    "{what} needs {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        // Any count larger than the file cannot be honest.
        if v > self.bytes.len() as u64 {
            return Err(Error::FilePayload(format!(
                "{what} = {v} exceeds file size"
            )));
        }
        Ok(v as usize)
    }

    fn index(&mut self, n: usize, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        if v >= n as u64 {
            return Err(Error::NodeIndex {
                index: v as usize,
                num_nodes: n,
            });
        }
        Ok(v as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<Trajectory> {
    let mut c = Cursor { bytes, pos: 0 };
    let head = c
        .take(8, "header")
        .map_err(|_| Error::FileHeader(format!("file has only {} bytes", bytes.len())))?;
    if &head[..4] != MAGIC {
        return Err(Error::FileHeader(format!(
            "bad magic bytes {:?}",
            &head[..4]
        )));
    }
    if head[4] != LITTLE_ENDIAN {
        return Err(Error::FileEndianness(head[4]));
    }
    if head[5] != VERSION {
        return Err(Error::FileHeader(format!(
            "unsupported version {}",
            head[5]
        )));
    }
    let dim = c.count("dimension")?;
    let n = c.count("node count")?;
    let e = c.count("edge count")?;
    let f = c.count("triangle count")?;
    let t = c.count("step count")?;
    let comps = c.count("component count")?;
    let delta_t = c.f64("time step")?;
    let positions = c
        .take(8 * n * dim, "positions")?
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let node_types = c
        .take(n, "node types")?
        .iter()
        .map(|&b| {
            NodeType::from_index(b)
                .ok_or_else(|| Error::FileSchema(format!("unknown node type {b}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut edges = Vec::with_capacity(e);
    for _ in 0..e {
        edges.push((c.index(n, "edge")?, c.index(n, "edge")?));
    }
    let mut triangles = Vec::with_capacity(f);
    for _ in 0..f {
        triangles.push([
            c.index(n, "triangle")?,
            c.index(n, "triangle")?,
            c.index(n, "triangle")?,
        ]);
    }
    let mut schema = FieldSchema {
        names: Vec::with_capacity(comps),
        dynamical: Vec::with_capacity(comps),
    };
    for k in 0..comps {
        let flag = c.take(1, "schema flag")?[0];
        if flag > 1 {
            return Err(Error::FileSchema(format!(
                "component {k} has dynamical flag {flag}"
            )));
        }
        let len = u32::from_le_bytes(
            c.take(4, "schema name length")?
                .try_into()
                .expect("4 bytes"),
        );
        let name = std::str::from_utf8(c.take(len as usize, "schema name")?)
            .map_err(|_| Error::FileSchema(format!("component {k} name is not UTF-8")))?;
        schema.names.push(name.to_owned());
        schema.dynamical.push(flag == 1);
    }
    let states: Vec<f32> = c
        .take(4 * t * n * comps, "states")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    if c.pos != bytes.len() {
        return Err(Error::FilePayload(format!(
            "{} trailing bytes after states",
            bytes.len() - c.pos
        )));
    }
    let mesh = MeshGraph::new(dim, positions, edges, node_types)?.with_triangles(triangles);
    Trajectory::new(mesh, states, t, delta_t, schema)
}

pub fn write_trajectory(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_trajectory(traj)).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trajectory(&bytes)
}
