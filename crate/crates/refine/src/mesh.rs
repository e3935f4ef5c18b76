//! Indexed triangle meshes: topology queries, cleanup, decimation and export.
//!
//! Faces are counter-clockwise when seen from outside, so a closed mesh has
//! positive signed volume.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use petgraph::unionfind::UnionFind;
use trigen_core::vec3::{self, Vec3};

use crate::error::{RefineError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Optional per-vertex RGB in [0, 1].
    pub colors: Option<Vec<[f32; 3]>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(RefineError::Mesh(format!("face {f:?} indexes past {n} vertices")));
        }
        Ok(Self {
            vertices,
            faces,
            colors: None,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Subdivided icosahedron projected onto a sphere about the origin.
    pub fn icosphere(radius: f32, subdivisions: usize) -> Self {
        let p = (1.0 + 5f32.sqrt()) / 2.0;
        let mut vertices: Vec<Vec3> = [
            [-1.0, p, 0.0],
            [1.0, p, 0.0],
            [-1.0, -p, 0.0],
            [1.0, -p, 0.0],
            [0.0, -1.0, p],
            [0.0, 1.0, p],
            [0.0, -1.0, -p],
            [0.0, 1.0, -p],
            [p, 0.0, -1.0],
            [p, 0.0, 1.0],
            [-p, 0.0, -1.0],
            [-p, 0.0, 1.0],
        ]
        .iter()
        .map(|&v| vec3::normalize(v))
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    let m = vec3::lerp(verts[a as usize], verts[b as usize], 0.5);
                    verts.push(vec3::normalize(m));
                    verts.len() as u32 - 1
                })
            };
            for [a, b, c] in faces {
                let ab = midpoint(a, b, &mut vertices);
                let bc = midpoint(b, c, &mut vertices);
                let ca = midpoint(c, a, &mut vertices);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        let vertices = vertices.into_iter().map(|v| vec3::scale(v, radius)).collect();
        Self {
            vertices,
            faces,
            colors: None,
        }
    }

    pub fn translated(mut self, by: Vec3) -> Self {
        for v in &mut self.vertices {
            *v = vec3::add(*v, by);
        }
        self
    }

    /// Appends `other` as a separate component.
    pub fn merged(mut self, other: &Mesh) -> Self {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.faces.extend(other.faces.iter().map(|f| f.map(|i| i + base)));
        self.colors = match (self.colors, &other.colors) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            _ => None,
        };
        self
    }

    pub fn bbox(&self) -> Option<(Vec3, Vec3)> {
        let mut it = self.faces.iter().flatten().map(|&i| self.vertices[i as usize]);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| {
            (
                [lo[0].min(v[0]), lo[1].min(v[1]), lo[2].min(v[2])],
                [hi[0].max(v[0]), hi[1].max(v[1]), hi[2].max(v[2])],
            )
        }))
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangle(f);
        vec3::cross(vec3::sub(b, a), vec3::sub(c, a))
    }

    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                vec3::dot(a, vec3::cross(b, c)) as f64 / 6.0
            })
            .sum()
    }

    /// Undirected edges with the number of faces using each.
    pub fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut m = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// `V − E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let used: HashSet<u32> = self.faces.iter().flatten().copied().collect();
        used.len() as i64 - self.edge_counts().len() as i64 + self.faces.len() as i64
    }

    /// Every edge borders exactly two faces with opposite orientation.
    pub fn is_watertight(&self) -> bool {
        if self.faces.is_empty() {
            return false;
        }
        let mut directed: HashMap<(u32, u32), i32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                if a == b {
                    return false;
                }
                *directed.entry((a, b)).or_insert(0) += 1;
            }
        }
        directed.iter().all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Face indices grouped by connected component (faces sharing a vertex),
    /// largest first.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut uf = UnionFind::<usize>::new(self.vertices.len());
        for f in &self.faces {
            uf.union(f[0] as usize, f[1] as usize);
            uf.union(f[0] as usize, f[2] as usize);
        }
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, f) in self.faces.iter().enumerate() {
            groups.entry(uf.find(f[0] as usize)).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort_by_key(|g| (Reverse(g.len()), g[0]));
        out
    }

    /// Keeps the listed faces and drops vertices nothing references.
    pub fn subset(&self, faces: &[usize]) -> Mesh {
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let mut vertices = Vec::new();
        let mut colors = self.colors.as_ref().map(|_| Vec::new());
        let mut out_faces = Vec::with_capacity(faces.len());
        for &f in faces {
            out_faces.push(self.faces[f].map(|i| {
                *remap.entry(i).or_insert_with(|| {
                    vertices.push(self.vertices[i as usize]);
                    if let (Some(dst), Some(src)) = (colors.as_mut(), self.colors.as_ref()) {
                        dst.push(src[i as usize]);
                    }
                    vertices.len() as u32 - 1
                })
            }));
        }
        Mesh {
            vertices,
            faces: out_faces,
            colors,
        }
    }

    pub fn compacted(&self) -> Mesh {
        self.subset(&(0..self.faces.len()).collect::<Vec<_>>())
    }

    /// Vertex neighbours through edges.
    pub fn adjacency(&self) -> Vec<Vec<u32>> {
        let mut sets: Vec<HashSet<u32>> = vec![HashSet::new(); self.vertices.len()];
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                sets[a as usize].insert(b);
                sets[b as usize].insert(a);
            }
        }
        sets.into_iter()
            .map(|s| {
                let mut v: Vec<u32> = s.into_iter().collect();
                v.sort_unstable();
                v
            })
            .collect()
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for (i, v) in self.vertices.iter().enumerate() {
            match &self.colors {
                Some(c) => {
                    let c = c[i];
                    writeln!(s, "v {} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]).unwrap()
                }
                None => writeln!(s, "v {} {} {}", v[0], v[1], v[2]).unwrap(),
            }
        }
        for f in &self.faces {
            writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
        }
        s
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }

    /// ASCII PLY with 8-bit vertex colors when present.
    pub fn to_ply(&self) -> String {
        let mut s = String::from("ply\nformat ascii 1.0\n");
        writeln!(s, "element vertex {}", self.vertices.len()).unwrap();
        s.push_str("property float x\nproperty float y\nproperty float z\n");
        if self.colors.is_some() {
            s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        }
        writeln!(s, "element face {}", self.faces.len()).unwrap();
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for (i, v) in self.vertices.iter().enumerate() {
            write!(s, "{} {} {}", v[0], v[1], v[2]).unwrap();
            if let Some(c) = &self.colors {
                let q = c[i].map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8);
                write!(s, " {} {} {}", q[0], q[1], q[2]).unwrap();
            }
            s.push('\n');
        }
        for f in &self.faces {
            writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
        }
        s
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_ply())?;
        Ok(())
    }

    /// Parses `v` and `f` records; polygons are fan-triangulated and
    /// `v x y z r g b` colors are kept when every vertex has them.
    pub fn parse_obj(text: &str) -> Result<Mesh> {
        let mut vertices = Vec::new();
        let mut colors = Vec::new();
        let mut faces = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let bad = |what: &str| RefineError::Mesh(format!("line {}: {what}", line_no + 1));
            match it.next() {
                Some("v") => {
                    let nums: Vec<f32> = it.map(|t| t.parse::<f32>().map_err(|_| bad("bad number"))).collect::<Result<_>>()?;
                    if nums.len() < 3 {
                        return Err(bad("vertex needs three coordinates"));
                    }
                    vertices.push([nums[0], nums[1], nums[2]]);
                    if nums.len() >= 6 {
                        colors.push([nums[3], nums[4], nums[5]]);
                    }
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            let i: i64 = head.parse().map_err(|_| bad("bad index"))?;
                            let n = vertices.len() as i64;
                            let abs = if i < 0 { n + i } else { i - 1 };
                            if abs < 0 || abs >= n {
                                return Err(bad("index out of range"));
                            }
                            Ok(abs as u32)
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(bad("face needs three vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let mut mesh = Mesh::new(vertices, faces)?;
        if !colors.is_empty() && colors.len() == mesh.vertices.len() {
            mesh.colors = Some(colors);
        }
        Ok(mesh)
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
        Mesh::parse_obj(&std::fs::read_to_string(path)?)
    }
}

/// Keeps only the largest connected component by face count.
pub fn remove_floaters(mesh: &Mesh) -> Mesh {
    match mesh.components().first() {
        Some(largest) if largest.len() < mesh.faces.len() => {
            let mut keep = largest.clone();
            keep.sort_unstable();
            mesh.subset(&keep)
        }
        _ => mesh.clone(),
    }
}

/// Shortest-edge collapse down to at most `max_faces`, rejecting collapses
/// that would change topology (link condition) or flip a face.
pub fn decimate(mesh: &Mesh, max_faces: usize) -> Mesh {
    let mesh = mesh.compacted();
    if mesh.faces.len() <= max_faces {
        return mesh;
    }
    let mut pos = mesh.vertices.clone();
    let mut colors = mesh.colors.clone();
    let mut faces = mesh.faces.clone();
    let mut face_alive = vec![true; faces.len()];
    let mut vert_alive = vec![true; pos.len()];
    let mut incident: Vec<HashSet<usize>> = vec![HashSet::new(); pos.len()];
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            incident[v as usize].insert(fi);
        }
    }
    let key = |a: Vec3, b: Vec3| vec3::distance(a, b).to_bits();
    let mut heap = BinaryHeap::new();
    for &(a, b) in mesh.edge_counts().keys() {
        heap.push(Reverse((key(pos[a as usize], pos[b as usize]), a, b)));
    }
    let neighbours = |v: u32, faces: &[[u32; 3]], incident: &[HashSet<usize>]| -> HashSet<u32> {
        incident[v as usize]
            .iter()
            .flat_map(|&f| faces[f])
            .filter(|&w| w != v)
            .collect()
    };
    let mut alive = faces.len();
    while alive > max_faces && alive > 4 {
        let Some(Reverse((len, u, v))) = heap.pop() else { break };
        if !vert_alive[u as usize] || !vert_alive[v as usize] {
            continue;
        }
        let shared: Vec<usize> = incident[u as usize].intersection(&incident[v as usize]).copied().collect();
        if shared.is_empty() {
            continue;
        }
        let now = key(pos[u as usize], pos[v as usize]);
        if now != len {
            heap.push(Reverse((now, u, v)));
            continue;
        }
        let nu = neighbours(u, &faces, &incident);
        let nv = neighbours(v, &faces, &incident);
        let common = nu.intersection(&nv).count();
        if shared.len() != 2 || common != 2 {
            continue;
        }
        let mid = vec3::lerp(pos[u as usize], pos[v as usize], 0.5);
        let flips = incident[u as usize]
            .iter()
            .chain(incident[v as usize].iter())
            .filter(|f| !shared.contains(f))
            .any(|&f| {
                let tri = faces[f];
                let before = tri.map(|i| pos[i as usize]);
                let after = tri.map(|i| if i == u || i == v { mid } else { pos[i as usize] });
                let n0 = vec3::cross(vec3::sub(before[1], before[0]), vec3::sub(before[2], before[0]));
                let n1 = vec3::cross(vec3::sub(after[1], after[0]), vec3::sub(after[2], after[0]));
                vec3::dot(n0, n1) <= 0.0
            });
        if flips {
            continue;
        }
        for &f in &shared {
            face_alive[f] = false;
            for &w in &faces[f] {
                incident[w as usize].remove(&f);
            }
            alive -= 1;
        }
        let moved: Vec<usize> = incident[v as usize].drain().collect();
        for f in moved {
            for w in faces[f].iter_mut() {
                if *w == v {
                    *w = u;
                }
            }
            incident[u as usize].insert(f);
        }
        pos[u as usize] = mid;
        if let Some(c) = colors.as_mut() {
            let (cu, cv) = (c[u as usize], c[v as usize]);
            c[u as usize] = [0, 1, 2].map(|k| 0.5 * (cu[k] + cv[k]));
        }
        vert_alive[v as usize] = false;
        for w in neighbours(u, &faces, &incident) {
            heap.push(Reverse((key(pos[u as usize], pos[w as usize]), u.min(w), u.max(w))));
        }
    }
    let kept: Vec<usize> = (0..faces.len()).filter(|&f| face_alive[f]).collect();
    let out = Mesh {
        vertices: pos,
        faces: std::mem::take(&mut faces),
        colors,
    };
    out.subset(&kept)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SmoothConfig {
    pub laplacian_weight: f32,
    pub offset_weight: f32,
    pub iterations: usize,
    pub step: f32,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            laplacian_weight: 1.0,
            offset_weight: 0.1,
            iterations: 20,
            step: 0.2,
        }
    }
}

/// `Σ‖v − mean(neighbours)‖²` (uniform Laplacian) and `Σ‖v − v₀‖²`.
pub fn smoothness_losses(mesh: &Mesh, rest: &[Vec3]) -> (f64, f64) {
    let adj = mesh.adjacency();
    let lap = laplacians(&mesh.vertices, &adj);
    let l = lap.iter().map(|d| vec3::dot(*d, *d) as f64).sum();
    let o = mesh
        .vertices
        .iter()
        .zip(rest)
        .map(|(v, r)| {
            let d = vec3::sub(*v, *r);
            vec3::dot(d, d) as f64
        })
        .sum();
    (l, o)
}

fn laplacians(pos: &[Vec3], adj: &[Vec<u32>]) -> Vec<Vec3> {
    pos.iter()
        .zip(adj)
        .map(|(&p, nb)| {
            if nb.is_empty() {
                return [0.0; 3];
            }
            let mut m = [0.0f32; 3];
            for &j in nb {
                m = vec3::add(m, pos[j as usize]);
            }
            vec3::sub(p, vec3::scale(m, 1.0 / nb.len() as f32))
        })
        .collect()
}

/// Gradient descent on `w_lap·Laplacian + w_off·offset` starting from the
/// input positions, which also serve as the offset anchor.
pub fn smooth(mesh: &Mesh, cfg: &SmoothConfig) -> Mesh {
    let adj = mesh.adjacency();
    let rest = mesh.vertices.clone();
    let mut pos = rest.clone();
    for _ in 0..cfg.iterations {
        let lap = laplacians(&pos, &adj);
        let mut grad = vec![[0.0f32; 3]; pos.len()];
        for (i, nb) in adj.iter().enumerate() {
            if nb.is_empty() {
                continue;
            }
            grad[i] = vec3::add(grad[i], vec3::scale(lap[i], 2.0 * cfg.laplacian_weight));
            let share = 2.0 * cfg.laplacian_weight / nb.len() as f32;
            for &j in nb {
                grad[j as usize] = vec3::sub(grad[j as usize], vec3::scale(lap[i], share));
            }
        }
        for i in 0..pos.len() {
            let g = vec3::add(grad[i], vec3::scale(vec3::sub(pos[i], rest[i]), 2.0 * cfg.offset_weight));
            pos[i] = vec3::sub(pos[i], vec3::scale(g, cfg.step));
        }
    }
    Mesh {
        vertices: pos,
        faces: mesh.faces.clone(),
        colors: mesh.colors.clone(),
    }
}
