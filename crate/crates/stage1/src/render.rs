//! Emission–absorption volume rendering over the unit cube.
//!
//! Each ray is clipped to `[-1, 1]³` and split into `n_samples` equal strata.
//! Training jitters one sample inside every stratum; evaluation takes the
//! stratum midpoints so renders are deterministic. Rays that miss the cube
//! composite straight to the background.

use rand::Rng;
use trigen_core::{Tape, Tensor, Var};

use crate::camera::{intersect_unit_cube, Camera, Ray};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::triplane::{SharedDecoder, TriPlane};

pub const WHITE: [f32; 3] = [1.0, 1.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub background: [f32; 3],
}

impl RenderConfig {
    pub fn new(n_samples: usize) -> Self {
        Self {
            n_samples,
            background: WHITE,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config(format!("need at least 2 samples per ray, got {}", self.n_samples)));
        }
        Ok(())
    }
}

/// Sample points for the rays that hit the cube.
#[derive(Clone, Debug)]
pub struct RaySamples {
    /// `[hits·n_samples × 3]`, ray-major.
    pub points: Tensor,
    /// Segment length owned by each sample.
    pub deltas: Vec<f32>,
    /// Index into the input ray list of each hitting ray.
    pub hit_rows: Vec<usize>,
    pub n_samples: usize,
}

pub fn sample_rays<R: Rng>(rays: &[Ray], n_samples: usize, mut jitter: Option<&mut R>) -> RaySamples {
    let mut points = Vec::new();
    let mut deltas = Vec::new();
    let mut hit_rows = Vec::new();
    let mut ts = vec![0.0f32; n_samples];
    for (i, ray) in rays.iter().enumerate() {
        let Some((t0, t1)) = intersect_unit_cube(ray) else {
            continue;
        };
        hit_rows.push(i);
        let step = (t1 - t0) / n_samples as f32;
        for (k, t) in ts.iter_mut().enumerate() {
            let u = match jitter.as_deref_mut() {
                Some(rng) => rng.random::<f32>(),
                None => 0.5,
            };
            *t = t0 + (k as f32 + u) * step;
        }
        for k in 0..n_samples {
            let p = ray.at(ts[k]);
            // Clamp tiny excursions from rounding at the cube faces.
            points.extend(p.map(|c| c.clamp(-1.0, 1.0)));
            let next = if k + 1 < n_samples { ts[k + 1] } else { t1 };
            let prev_edge = if k == 0 { t0 } else { 0.5 * (ts[k - 1] + ts[k]) };
            let next_edge = if k + 1 < n_samples { 0.5 * (ts[k] + next) } else { t1 };
            deltas.push(next_edge - prev_edge);
        }
    }
    let m = hit_rows.len() * n_samples;
    RaySamples {
        points: Tensor::new(&[m, 3], points).expect("consistent size"),
        deltas,
        hit_rows,
        n_samples,
    }
}

/// Front-to-back compositing of `[R·S]` densities and `[R·S × 3]` colors
/// into `[R × 3]` pixel colors over `background`.
///
/// With `α_k = 1 − exp(−σ_k δ_k)`, `T_k = Π_{j<k}(1 − α_j)` and
/// `w_k = T_k α_k`, the output is `Σ w_k c_k + T_S · bg`. The backward pass
/// uses `∂C/∂c_k = w_k` and
/// `∂C/∂σ_k = δ_k (T_{k+1} c_k − Σ_{i>k} w_i c_i − T_S · bg)`.
pub fn composite(
    tape: &mut Tape,
    sigma: Var,
    rgb: Var,
    deltas: &[f32],
    n_samples: usize,
    background: [f32; 3],
) -> Result<Var> {
    let (sv, cv) = (tape.value(sigma), tape.value(rgb));
    let m = sv.numel();
    if cv.shape() != [m, 3] || deltas.len() != m || n_samples == 0 || m % n_samples != 0 {
        return Err(Error::Num(trigen_core::NumError::ShapeMismatch {
            op: "composite",
            lhs: sv.shape().to_vec(),
            rhs: cv.shape().to_vec(),
        }));
    }
    let rays = m / n_samples;
    let (sd, cd) = (sv.data(), cv.data());
    let mut out = vec![0.0f32; rays * 3];
    // Per-sample weights and transmittance after the sample, kept for backward.
    let mut weights = vec![0.0f32; m];
    let mut trans_after = vec![0.0f32; m];
    for r in 0..rays {
        let mut t = 1.0f32;
        let mut acc = [0.0f32; 3];
        for k in r * n_samples..(r + 1) * n_samples {
            let decay = (-sd[k] * deltas[k]).exp();
            let w = t * (1.0 - decay);
            for ch in 0..3 {
                acc[ch] += w * cd[3 * k + ch];
            }
            t *= decay;
            weights[k] = w;
            trans_after[k] = t;
        }
        for ch in 0..3 {
            out[3 * r + ch] = acc[ch] + t * background[ch];
        }
    }
    let out = Tensor::new(&[rays, 3], out)?;
    let deltas = deltas.to_vec();
    Ok(tape.record("composite", out, &[sigma, rgb], move |args| {
        let g = args.grad.data();
        let cd = args.inputs[1].data();
        let gs = args.needs(0).then(|| {
            let mut gs = vec![0.0f32; m];
            for r in 0..rays {
                let base = r * n_samples;
                let t_end = trans_after[base + n_samples - 1];
                let gr = [g[3 * r], g[3 * r + 1], g[3 * r + 2]];
                // Running suffix Σ_{i>k} w_i c_i + T_S bg, dotted with the output grad.
                let mut suffix: f32 = (0..3).map(|ch| gr[ch] * t_end * background[ch]).sum();
                for k in (base..base + n_samples).rev() {
                    let own: f32 = (0..3).map(|ch| gr[ch] * cd[3 * k + ch]).sum();
                    gs[k] = deltas[k] * (trans_after[k] * own - suffix);
                    suffix += weights[k] * own;
                }
            }
            Tensor::new(&[m], gs).unwrap()
        });
        let gc = args.needs(1).then(|| {
            let mut gc = vec![0.0f32; m * 3];
            for k in 0..m {
                let r = k / n_samples;
                for ch in 0..3 {
                    gc[3 * k + ch] = weights[k] * g[3 * r + ch];
                }
            }
            Tensor::new(&[m, 3], gc).unwrap()
        });
        vec![gs, gc]
    })?)
}

/// Renders `rays` through an arbitrary field mapping `[N×3]` points to
/// `(rgb [N×3], sigma [N])`. Returns `[rays × 3]`.
pub fn render_rays<R, F>(tape: &mut Tape, rays: &[Ray], cfg: &RenderConfig, jitter: Option<&mut R>, mut field: F) -> Result<Var>
where
    R: Rng,
    F: FnMut(&mut Tape, &Tensor) -> Result<(Var, Var)>,
{
    cfg.validate()?;
    let bg = Tensor::new(&[rays.len(), 3], rays.iter().flat_map(|_| cfg.background).collect())?;
    let bg = tape.constant(bg);
    let s = sample_rays(rays, cfg.n_samples, jitter);
    if s.hit_rows.is_empty() {
        return Ok(bg);
    }
    let (rgb, sigma) = field(tape, &s.points)?;
    let colors = composite(tape, sigma, rgb, &s.deltas, s.n_samples, cfg.background)?;
    if s.hit_rows.len() == rays.len() {
        return Ok(colors);
    }
    Ok(tape.scatter_rows(bg, &s.hit_rows, colors)?)
}

/// Deterministic render of a field into an image, processed in ray chunks.
pub fn render_field_image<F>(cam: &Camera, cfg: &RenderConfig, mut field: F) -> Result<Image>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<(Var, Var)>,
{
    cam.validate()?;
    cam.ensure_outside_unit_cube()?;
    const CHUNK: usize = 1024;
    let rays = cam.rays();
    let mut data = Vec::with_capacity(rays.len() * 3);
    for chunk in rays.chunks(CHUNK) {
        let mut tape = Tape::new();
        let out = render_rays::<trigen_core::rng::Rng, _>(&mut tape, chunk, cfg, None, &mut field)?;
        data.extend_from_slice(tape.value(out).data());
    }
    Image::new(cam.width, cam.height, data)
}

pub fn render_image(tp: &TriPlane, dec: &SharedDecoder, cam: &Camera, n_samples: usize) -> Result<Image> {
    let cfg = RenderConfig::new(n_samples);
    render_field_image(cam, &cfg, |tape, xyz| {
        let params = dec.bind(tape, false);
        let planes = tp.bind(tape, false);
        dec.decode(tape, &params, &planes, xyz)
    })
}
