//! Marching cubes with vertex positions differentiable in the lattice
//! values and offsets.
//!
//! Topology is fixed by the signs of the lattice values; each output vertex
//! lies on one lattice edge `(a, b)` at
//! `p = (x_a + o_a) + t·((x_b + o_b) − (x_a + o_a))` with `t = s_a / (s_a − s_b)`.

use std::collections::HashMap;

use trigen_core::{Tape, Tensor, Var};

use crate::error::Result;
use crate::mc_tables::{CORNERS, EDGES, EDGE_TABLE, TRI_TABLE};
use crate::mesh::Mesh;
use crate::sdf::SdfGrid;

/// Extracted mesh plus the lattice edge each vertex sits on.
#[derive(Clone, Debug, PartialEq)]
pub struct McMesh {
    pub mesh: Mesh,
    pub edges: Vec<(usize, usize)>,
}

impl McMesh {
    /// True when the lattice had no sign change; the mesh is then empty.
    pub fn is_empty(&self) -> bool {
        self.mesh.faces.is_empty()
    }
}

/// Topology and vertex placement from the current lattice values.
pub fn extract(grid: &SdfGrid) -> McMesh {
    let n = grid.resolution;
    let vals = grid.values.data();
    let mut edge_ids: HashMap<(usize, usize), u32> = HashMap::new();
    let mut edges = Vec::new();
    let mut faces = Vec::new();
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            for k in 0..n - 1 {
                let corner = CORNERS.map(|c| grid.index(i + c[0], j + c[1], k + c[2]));
                let mut case = 0usize;
                for (bit, &c) in corner.iter().enumerate() {
                    if vals[c] < 0.0 {
                        case |= 1 << bit;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let [ca, cb] = EDGES[e as usize];
                        let (a, b) = (corner[ca], corner[cb]);
                        let key = (a.min(b), a.max(b));
                        ids[slot] = *edge_ids.entry(key).or_insert_with(|| {
                            edges.push(key);
                            edges.len() as u32 - 1
                        });
                    }
                    // The table winds triangles clockwise seen from outside.
                    faces.push([ids[0], ids[2], ids[1]]);
                }
            }
        }
    }
    let vertices = edges
        .iter()
        .map(|&(a, b)| edge_vertex(grid, vals, grid.offsets.data(), a, b).0)
        .collect();
    McMesh {
        mesh: Mesh {
            vertices,
            faces,
            colors: None,
        },
        edges,
    }
}

fn deformed(grid: &SdfGrid, off: &[f32], a: usize) -> [f32; 3] {
    let p = grid.point_of(a);
    [p[0] + off[3 * a], p[1] + off[3 * a + 1], p[2] + off[3 * a + 2]]
}

/// Position and interpolation weight `t` of the vertex on edge `(a, b)`.
fn edge_vertex(grid: &SdfGrid, vals: &[f32], off: &[f32], a: usize, b: usize) -> ([f32; 3], f32) {
    let (sa, sb) = (vals[a], vals[b]);
    let t = sa / (sa - sb);
    let (pa, pb) = (deformed(grid, off, a), deformed(grid, off, b));
    ([0, 1, 2].map(|d| pa[d] + t * (pb[d] - pa[d])), t)
}

/// Non-differentiable extraction returning just the mesh.
pub fn marching_cubes(grid: &SdfGrid) -> Mesh {
    extract(grid).mesh
}

/// Records `[V×3]` vertex positions for `topology` as a function of the
/// lattice `values` `[n³]` and `offsets` `[n³×3]`.
pub fn vertex_positions(tape: &mut Tape, grid: &SdfGrid, topology: &McMesh, values: Var, offsets: Var) -> Result<Var> {
    let (vals, off) = (tape.value(values).clone(), tape.value(offsets).clone());
    let edges = topology.edges.clone();
    let nv = edges.len();
    let mut out = Vec::with_capacity(nv * 3);
    for &(a, b) in &edges {
        out.extend_from_slice(&edge_vertex(grid, vals.data(), off.data(), a, b).0);
    }
    let bases: Vec<([f32; 3], [f32; 3])> = edges.iter().map(|&(a, b)| (grid.point_of(a), grid.point_of(b))).collect();
    let n3 = vals.numel();
    let out = Tensor::new(&[nv, 3], out)?;
    Ok(tape.record("mc_vertices", out, &[values, offsets], move |args| {
        let g = args.grad.data();
        let (vals, off) = (args.inputs[0].data(), args.inputs[1].data());
        let mut gv = vec![0.0f32; n3];
        let mut go = vec![0.0f32; n3 * 3];
        for (v, (&(a, b), &(xa, xb))) in edges.iter().zip(&bases).enumerate() {
            let (sa, sb) = (vals[a], vals[b]);
            let den = sa - sb;
            let t = sa / den;
            let gp = [g[3 * v], g[3 * v + 1], g[3 * v + 2]];
            // dp/dt = p_b − p_a on the deformed lattice.
            let dpdt: f32 = (0..3)
                .map(|d| gp[d] * ((xb[d] + off[3 * b + d]) - (xa[d] + off[3 * a + d])))
                .sum();
            gv[a] += dpdt * (-sb / (den * den));
            gv[b] += dpdt * (sa / (den * den));
            for d in 0..3 {
                go[3 * a + d] += (1.0 - t) * gp[d];
                go[3 * b + d] += t * gp[d];
            }
        }
        vec![
            Some(Tensor::new(&[n3], gv).unwrap()),
            Some(Tensor::new(&[n3, 3], go).unwrap()),
        ]
    })?)
}
