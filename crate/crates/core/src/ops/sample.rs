use crate::error::{NumError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bilinear footprint of one query on a `W×H` plane.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    idx: [usize; 4],
    fx: f32,
    fy: f32,
    /// d(texel x)/du, zero where the coordinate is clamped to the border.
    dx_du: f32,
    dy_dv: f32,
}

/// Maps a normalized coordinate in [-1, 1] to a texel coordinate with
/// texel centers at `(2i + 1) / n - 1`, clamped to the border texels.
fn texel_coord(u: f32, n: usize) -> (f32, f32) {
    let x = ((u + 1.0) * n as f32 - 1.0) * 0.5;
    let hi = (n - 1) as f32;
    if x <= 0.0 {
        (0.0, 0.0)
    } else if x >= hi {
        (hi, 0.0)
    } else {
        (x, n as f32 * 0.5)
    }
}

fn footprint(u: f32, v: f32, w: usize, h: usize) -> Footprint {
    let (x, dx_du) = texel_coord(u, w);
    let (y, dy_dv) = texel_coord(v, h);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Footprint {
        idx: [x0 * h + y0, x0 * h + y1, x1 * h + y0, x1 * h + y1],
        fx: x - x0 as f32,
        fy: y - y0 as f32,
        dx_du,
        dy_dv,
    }
}

impl Tape {
    /// Bilinear lookup of a `[C×W×H]` feature plane at `[N×2]` normalized
    /// coordinates `(u, v) ∈ [-1, 1]²`; `u` indexes the W axis. Out-of-range
    /// coordinates clamp to the border texels. Returns `[N×C]`.
    ///
    /// Differentiable with respect to both the plane and the coordinates.
    pub fn grid_sample_2d(&mut self, plane: Var, uv: Var) -> Result<Var> {
        let (pv, qv) = (self.value(plane), self.value(uv));
        if pv.rank() != 3 || qv.rank() != 2 || qv.shape()[1] != 2 {
            return Err(NumError::ShapeMismatch {
                op: "grid_sample_2d",
                lhs: pv.shape().to_vec(),
                rhs: qv.shape().to_vec(),
            });
        }
        let (c, w, h) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
        let n = qv.shape()[0];
        let q = qv.data();
        let fps: Vec<Footprint> = (0..n).map(|i| footprint(q[2 * i], q[2 * i + 1], w, h)).collect();
        let pd = pv.data();
        let mut out = vec![0.0f32; n * c];
        for ch in 0..c {
            let p = &pd[ch * w * h..(ch + 1) * w * h];
            for (i, f) in fps.iter().enumerate() {
                let (fx, fy) = (f.fx, f.fy);
                let v0 = p[f.idx[0]] * (1.0 - fy) + p[f.idx[1]] * fy;
                let v1 = p[f.idx[2]] * (1.0 - fy) + p[f.idx[3]] * fy;
                out[i * c + ch] = v0 * (1.0 - fx) + v1 * fx;
            }
        }
        let out = Tensor::new(&[n, c], out)?;
        self.record("grid_sample_2d", out, &[plane, uv], move |args| {
            let g = args.grad.data();
            let gp = args.needs(0).then(|| {
                let mut gp = vec![0.0f32; c * w * h];
                for ch in 0..c {
                    let dst = &mut gp[ch * w * h..(ch + 1) * w * h];
                    for (i, f) in fps.iter().enumerate() {
                        let gv = g[i * c + ch];
                        let (fx, fy) = (f.fx, f.fy);
                        dst[f.idx[0]] += gv * (1.0 - fx) * (1.0 - fy);
                        dst[f.idx[1]] += gv * (1.0 - fx) * fy;
                        dst[f.idx[2]] += gv * fx * (1.0 - fy);
                        dst[f.idx[3]] += gv * fx * fy;
                    }
                }
                Tensor::new(&[c, w, h], gp).unwrap()
            });
            let guv = args.needs(1).then(|| {
                let pd = args.inputs[0].data();
                let mut guv = vec![0.0f32; n * 2];
                for (i, f) in fps.iter().enumerate() {
                    let (fx, fy) = (f.fx, f.fy);
                    let (mut gx, mut gy) = (0.0f32, 0.0f32);
                    for ch in 0..c {
                        let p = &pd[ch * w * h..(ch + 1) * w * h];
                        let (v00, v01, v10, v11) = (p[f.idx[0]], p[f.idx[1]], p[f.idx[2]], p[f.idx[3]]);
                        let gv = g[i * c + ch];
                        gx += gv * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                        gy += gv * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
                    }
                    guv[2 * i] = gx * f.dx_du;
                    guv[2 * i + 1] = gy * f.dy_dv;
                }
                Tensor::new(&[n, 2], guv).unwrap()
            });
            vec![gp, guv]
        })
    }
}
