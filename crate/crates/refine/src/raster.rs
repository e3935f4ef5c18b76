//! Z-buffered triangle rasterization with perspective-correct barycentrics,
//! and a differentiable textured render built on it.
//!
//! Visibility and barycentrics are piecewise constant in the vertex
//! positions; gradients flow through the interpolated surface point into the
//! texture lookup.

use trigen_core::vec3::Vec3;
use trigen_core::{Tape, Tensor, Var};
use trigen_stage1::{Camera, Image};

use crate::error::{RefineError, Result};
use crate::hashgrid::{BoundTexture, HashGridTexture};

/// Visible surface samples of one view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Fragments {
    pub width: usize,
    pub height: usize,
    /// Flat pixel index `y·W + x` per fragment.
    pub pixels: Vec<usize>,
    pub faces: Vec<u32>,
    pub bary: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
}

impl Fragments {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn coverage_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.width * self.height];
        for &p in &self.pixels {
            m[p] = true;
        }
        m
    }
}

/// Rasterizes at pixel centres; triangles with a vertex behind the camera
/// are skipped, both windings are drawn.
pub fn rasterize(vertices: &[Vec3], faces: &[[u32; 3]], cam: &Camera) -> Fragments {
    let (w, h) = (cam.width, cam.height);
    let mut zbuf = vec![f32::INFINITY; w * h];
    let mut hit: Vec<Option<(u32, [f32; 3])>> = vec![None; w * h];
    let projected: Vec<Option<(f32, f32, f32)>> = vertices.iter().map(|&v| cam.project_with_depth(v)).collect();
    for (fi, tri) in faces.iter().enumerate() {
        let (Some(a), Some(b), Some(c)) = (projected[tri[0] as usize], projected[tri[1] as usize], projected[tri[2] as usize]) else {
            continue;
        };
        let area = edge(a, b, c.0, c.1);
        if area.abs() < 1e-12 {
            continue;
        }
        let x0 = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
        let y0 = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
        let x1 = (a.0.max(b.0).max(c.0).ceil().max(0.0) as usize).min(w);
        let y1 = (a.1.max(b.1).max(c.1).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let l = [edge(b, c, px, py) / area, edge(c, a, px, py) / area, edge(a, b, px, py) / area];
                if l.iter().any(|&v| v < 0.0) {
                    continue;
                }
                let inv = [l[0] / a.2, l[1] / b.2, l[2] / c.2];
                let s = inv[0] + inv[1] + inv[2];
                let z = 1.0 / s;
                let p = y * w + x;
                if z < zbuf[p] {
                    zbuf[p] = z;
                    hit[p] = Some((fi as u32, [inv[0] / s, inv[1] / s, inv[2] / s]));
                }
            }
        }
    }
    let mut out = Fragments {
        width: w,
        height: h,
        ..Default::default()
    };
    for (p, entry) in hit.into_iter().enumerate() {
        if let Some((f, b)) = entry {
            out.pixels.push(p);
            out.faces.push(f);
            out.bary.push(b);
            out.depth.push(zbuf[p]);
        }
    }
    out
}

fn edge(a: (f32, f32, f32), b: (f32, f32, f32), px: f32, py: f32) -> f32 {
    (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
}

/// Surface points `[P×3]` of the fragments, differentiable in `positions`
/// `[V×3]`.
pub fn surface_points(tape: &mut Tape, positions: Var, faces: &[[u32; 3]], frags: &Fragments) -> Result<Var> {
    let n = frags.len();
    let mut acc: Option<Var> = None;
    for k in 0..3 {
        let rows: Vec<usize> = frags.faces.iter().map(|&f| faces[f as usize][k] as usize).collect();
        let corner = tape.gather_rows(positions, &rows)?;
        let weights = Tensor::from_fn(&[n, 3], |i| frags.bary[i / 3][k]);
        let weights = tape.constant(weights);
        let weighted = tape.mul(corner, weights)?;
        acc = Some(match acc {
            None => weighted,
            Some(a) => tape.add(a, weighted)?,
        });
    }
    acc.ok_or_else(|| RefineError::Mesh("no fragments".into()))
}

/// Renders a textured mesh over a white background as `[3×H×W]`.
pub fn render_textured(
    tape: &mut Tape,
    positions: Var,
    faces: &[[u32; 3]],
    cam: &Camera,
    texture: &HashGridTexture,
    bound: &BoundTexture,
) -> Result<Var> {
    let (w, h) = (cam.width, cam.height);
    let verts: Vec<Vec3> = tape.value(positions).data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let frags = rasterize(&verts, faces, cam);
    let white = tape.constant(Tensor::ones(&[w * h, 3]));
    let hwc = if frags.is_empty() {
        white
    } else {
        let pts = surface_points(tape, positions, faces, &frags)?;
        let rgb = texture.lookup_var(tape, bound, pts)?;
        tape.scatter_rows(white, &frags.pixels, rgb)?
    };
    let chw = tape.transpose(hwc)?;
    Ok(tape.reshape(chw, &[3, h, w])?)
}

/// Value-only textured render.
pub fn render_image(vertices: &[Vec3], faces: &[[u32; 3]], cam: &Camera, texture: &HashGridTexture) -> Result<Image> {
    let mut tape = Tape::new();
    let pos = tape.constant(Tensor::new(&[vertices.len(), 3], vertices.iter().flatten().copied().collect())?);
    let bound = texture.bind(&mut tape, false);
    let img = render_textured(&mut tape, pos, faces, cam, texture, &bound)?;
    chw_to_image(tape.value(img))
}

/// Renders per-vertex colors, interpolated, over white.
pub fn render_vertex_colors(vertices: &[Vec3], faces: &[[u32; 3]], colors: &[[f32; 3]], cam: &Camera) -> Result<Image> {
    let frags = rasterize(vertices, faces, cam);
    let mut data = vec![1.0f32; cam.width * cam.height * 3];
    for i in 0..frags.len() {
        let tri = faces[frags.faces[i] as usize];
        let b = frags.bary[i];
        for ch in 0..3 {
            data[frags.pixels[i] * 3 + ch] = (0..3).map(|k| b[k] * colors[tri[k] as usize][ch]).sum();
        }
    }
    Ok(Image::new(cam.width, cam.height, data)?)
}

/// `[3×H×W]` tensor to an interleaved image.
pub fn chw_to_image(t: &Tensor) -> Result<Image> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(RefineError::Config(format!("expected [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    let data = (0..h * w * 3).map(|i| d[(i % 3) * h * w + i / 3]).collect();
    Ok(Image::new(w, h, data)?)
}

/// Interleaved image to a `[3×H×W]` tensor.
pub fn image_to_chw(img: &Image) -> Tensor {
    let (w, h) = (img.width(), img.height());
    let d = img.data();
    Tensor::from_fn(&[3, h, w], |i| d[(i % (h * w)) * 3 + i / (h * w)])
}
