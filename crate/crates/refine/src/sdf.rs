//! Signed distance lattices with per-point offsets.

use trigen_core::vec3::{self, Vec3};
use trigen_core::Tensor;

use crate::error::{RefineError, Result};
use crate::mesh::Mesh;

pub const DESK_RESOLUTION: usize = 32;
pub const PAPER_RESOLUTION: usize = 128;

/// `n³` signed distances on a cubic lattice, negative inside, with a
/// companion `n³×3` offset grid bounded by half a cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfGrid {
    pub resolution: usize,
    pub min: Vec3,
    pub max: Vec3,
    pub values: Tensor,
    pub offsets: Tensor,
}

impl SdfGrid {
    pub fn from_fn(resolution: usize, min: Vec3, max: Vec3, f: impl Fn(Vec3) -> f32) -> Result<Self> {
        if resolution < 2 || (0..3).any(|a| max[a] <= min[a]) {
            return Err(RefineError::Config(format!(
                "lattice of {resolution} points over {min:?}..{max:?}"
            )));
        }
        let n = resolution;
        let mut values = Vec::with_capacity(n * n * n);
        let mut grid = Self {
            resolution: n,
            min,
            max,
            values: Tensor::zeros(&[0]),
            offsets: Tensor::zeros(&[n * n * n, 3]),
        };
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    values.push(f(grid.point(i, j, k)));
                }
            }
        }
        grid.values = Tensor::new(&[n * n * n], values)?;
        Ok(grid)
    }

    /// Analytic sphere about the origin on the cube `[-half, half]³`.
    pub fn sphere(resolution: usize, radius: f32, half: f32) -> Result<Self> {
        Self::from_fn(resolution, [-half; 3], [half; 3], |p| vec3::norm(p) - radius)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    pub fn spacing(&self) -> Vec3 {
        let d = (self.resolution - 1) as f32;
        [0, 1, 2].map(|a| (self.max[a] - self.min[a]) / d)
    }

    /// Largest lattice spacing.
    pub fn cell_size(&self) -> f32 {
        let s = self.spacing();
        s[0].max(s[1]).max(s[2])
    }

    pub fn cell_diagonal(&self) -> f32 {
        vec3::norm(self.spacing())
    }

    /// Undeformed lattice position.
    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = self.spacing();
        [
            self.min[0] + s[0] * i as f32,
            self.min[1] + s[1] * j as f32,
            self.min[2] + s[2] * k as f32,
        ]
    }

    pub fn point_of(&self, flat: usize) -> Vec3 {
        let n = self.resolution;
        self.point(flat / (n * n), (flat / n) % n, flat % n)
    }

    pub fn max_offset(&self) -> f32 {
        0.5 * self.cell_size()
    }

    pub fn clamp_offsets(&mut self) {
        let m = self.max_offset();
        self.offsets.data_mut().iter_mut().for_each(|v| *v = v.clamp(-m, m));
    }

    pub fn has_zero_crossing(&self) -> bool {
        let d = self.values.data();
        d.iter().any(|&v| v < 0.0) && d.iter().any(|&v| v >= 0.0)
    }
}

/// Closest point on triangle `abc` to `p` by Voronoi-region tests, in f64.
fn closest_on_triangle(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let sub = |x: [f64; 3], y: [f64; 3]| [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
    let dot = |x: [f64; 3], y: [f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
    let along = |o: [f64; 3], d: [f64; 3], t: f64| [o[0] + d[0] * t, o[1] + d[1] * t, o[2] + d[2] * t];
    let (ab, ac, ap) = (sub(b, a), sub(c, a), sub(p, a));
    let (d1, d2) = (dot(ab, ap), dot(ac, ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let (d3, d4) = (dot(ab, bp), dot(ac, bp));
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return along(a, ab, d1 / (d1 - d3));
    }
    let cp = sub(p, c);
    let (d5, d6) = (dot(ab, cp), dot(ac, cp));
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return along(a, ac, d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return along(b, sub(c, b), (d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    let (v, w) = (vb * denom, vc * denom);
    [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Bounding-volume hierarchy over triangles for nearest-distance queries.
struct Bvh {
    tris: Vec<[[f64; 3]; 3]>,
    order: Vec<usize>,
    nodes: Vec<BvhNode>,
}

struct BvhNode {
    lo: [f64; 3],
    hi: [f64; 3],
    /// Leaf range into `order`, or child node indices.
    kind: NodeKind,
}

enum NodeKind {
    Leaf(usize, usize),
    Inner(usize, usize),
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    fn new(mesh: &Mesh) -> Self {
        let tris: Vec<[[f64; 3]; 3]> = (0..mesh.faces.len())
            .map(|f| mesh.triangle(f).map(|v| v.map(|x| x as f64)))
            .collect();
        let mut bvh = Self {
            order: (0..tris.len()).collect(),
            tris,
            nodes: Vec::new(),
        };
        let n = bvh.order.len();
        bvh.build(0, n);
        bvh
    }

    fn bounds(&self, from: usize, to: usize) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &t in &self.order[from..to] {
            for v in &self.tris[t] {
                for a in 0..3 {
                    lo[a] = lo[a].min(v[a]);
                    hi[a] = hi[a].max(v[a]);
                }
            }
        }
        (lo, hi)
    }

    fn build(&mut self, from: usize, to: usize) -> usize {
        let (lo, hi) = self.bounds(from, to);
        let id = self.nodes.len();
        self.nodes.push(BvhNode {
            lo,
            hi,
            kind: NodeKind::Leaf(from, to),
        });
        if to - from > LEAF_SIZE {
            let axis = (0..3)
                .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
                .unwrap_or(0);
            let tris = &self.tris;
            let centroid = |t: usize| tris[t].iter().map(|v| v[axis]).sum::<f64>();
            let mid = (from + to) / 2;
            self.order[from..to].select_nth_unstable_by(mid - from, |&x, &y| centroid(x).total_cmp(&centroid(y)));
            let l = self.build(from, mid);
            let r = self.build(mid, to);
            self.nodes[id].kind = NodeKind::Inner(l, r);
        }
        id
    }

    fn box_dist2(node: &BvhNode, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let d = (node.lo[a] - p[a]).max(0.0).max(p[a] - node.hi[a]);
                d * d
            })
            .sum()
    }

    fn nearest2(&self, p: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if Self::box_dist2(node, p) >= best {
                continue;
            }
            match node.kind {
                NodeKind::Leaf(from, to) => {
                    for &t in &self.order[from..to] {
                        let [a, b, c] = self.tris[t];
                        best = best.min(dist2(p, closest_on_triangle(p, a, b, c)));
                    }
                }
                NodeKind::Inner(l, r) => {
                    let (dl, dr) = (Self::box_dist2(&self.nodes[l], p), Self::box_dist2(&self.nodes[r], p));
                    // Visit the nearer child first.
                    if dl < dr {
                        stack.push(r);
                        stack.push(l);
                    } else {
                        stack.push(l);
                        stack.push(r);
                    }
                }
            }
        }
        best
    }
}

/// Cubic bounds around the mesh with 20% padding, so the lattice boundary
/// lies outside the surface.
pub fn default_bounds(mesh: &Mesh) -> Result<(Vec3, Vec3)> {
    let (lo, hi) = mesh.bbox().ok_or_else(|| RefineError::Mesh("empty mesh".into()))?;
    let c = vec3::lerp(lo, hi, 0.5);
    let half = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f32, f32::max) * 0.5 * 1.2;
    let half = half.max(1e-3);
    Ok((vec3::sub(c, [half; 3]), vec3::add(c, [half; 3])))
}

pub fn mesh_to_sdf(mesh: &Mesh, resolution: usize) -> Result<SdfGrid> {
    let (lo, hi) = default_bounds(mesh)?;
    mesh_to_sdf_in(mesh, resolution, lo, hi)
}

/// Nearest-triangle distance, signed by the parity of crossings along a
/// slightly jittered +x ray through each lattice row.
pub fn mesh_to_sdf_in(mesh: &Mesh, resolution: usize, min: Vec3, max: Vec3) -> Result<SdfGrid> {
    if mesh.is_empty() {
        return Err(RefineError::Mesh("cannot build an SDF from an empty mesh".into()));
    }
    let mut grid = SdfGrid::from_fn(resolution, min, max, |_| 0.0)?;
    let n = resolution;
    let s = grid.spacing();
    // Row (j, k) runs along x at (y_j + jy, z_k + jz); the jitter keeps rays
    // off vertices and edges that sit exactly on lattice lines.
    let (jy, jz) = (s[1] as f64 * 1.234_567e-4, s[2] as f64 * 2.345_678e-4);
    let row_y = |j: usize| min[1] as f64 + s[1] as f64 * j as f64 + jy;
    let row_z = |k: usize| min[2] as f64 + s[2] as f64 * k as f64 + jz;
    let mut crossings: Vec<Vec<f64>> = vec![Vec::new(); n * n];
    for f in 0..mesh.faces.len() {
        let t = mesh.triangle(f).map(|v| v.map(|x| x as f64));
        let (ylo, yhi) = (t.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min), t.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max));
        let (zlo, zhi) = (t.iter().map(|v| v[2]).fold(f64::INFINITY, f64::min), t.iter().map(|v| v[2]).fold(f64::NEG_INFINITY, f64::max));
        let j0 = (((ylo - min[1] as f64 - jy) / s[1] as f64).ceil().max(0.0)) as usize;
        let j1 = (((yhi - min[1] as f64 - jy) / s[1] as f64).floor().min((n - 1) as f64)) as i64;
        let k0 = (((zlo - min[2] as f64 - jz) / s[2] as f64).ceil().max(0.0)) as usize;
        let k1 = (((zhi - min[2] as f64 - jz) / s[2] as f64).floor().min((n - 1) as f64)) as i64;
        if j1 < 0 || k1 < 0 {
            continue;
        }
        let [a, b, c] = t;
        let area = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2]);
        if area == 0.0 {
            continue;
        }
        for j in j0..=j1 as usize {
            for k in k0..=k1 as usize {
                let (y, z) = (row_y(j), row_z(k));
                let w0 = ((b[1] - y) * (c[2] - z) - (c[1] - y) * (b[2] - z)) / area;
                let w1 = ((c[1] - y) * (a[2] - z) - (a[1] - y) * (c[2] - z)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
                    crossings[j * n + k].push(w0 * a[0] + w1 * b[0] + w2 * c[0]);
                }
            }
        }
    }
    crossings.iter_mut().for_each(|c| c.sort_by(f64::total_cmp));
    let bvh = Bvh::new(mesh);
    let values = grid.values.data_mut();
    for i in 0..n {
        let x = min[0] as f64 + s[0] as f64 * i as f64;
        for j in 0..n {
            for k in 0..n {
                let p = [x, min[1] as f64 + s[1] as f64 * j as f64, min[2] as f64 + s[2] as f64 * k as f64];
                let d = bvh.nearest2(p).sqrt();
                let before = crossings[j * n + k].partition_point(|&cx| cx < x);
                let inside = before % 2 == 1;
                values[(i * n + j) * n + k] = if inside { -d as f32 } else { d as f32 };
            }
        }
    }
    Ok(grid)
}
