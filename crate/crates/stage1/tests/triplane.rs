use proptest::prelude::*;
use trigen_core::gradcheck::gradient_error;
use trigen_core::{rng, Tape, Tensor, Var};
use trigen_stage1::camera::Camera;
use trigen_stage1::image::psnr;
use trigen_stage1::render::{composite, render_field_image, render_image, render_rays, RenderConfig};
use trigen_stage1::triplane::*;

const H: f32 = 1e-3;
/// Step for composed pipelines, where f32 rounding in the forward pass
/// swamps the central difference at `H`.
const H_PIPELINE: f32 = 1e-2;

fn small_decoder(tp: &TriPlane, seed: u64) -> SharedDecoder {
    let cfg = DecoderConfig {
        hidden: 8,
        hidden_layers: 2,
        density_gain: 1.0,
        ..DecoderConfig::default()
    };
    SharedDecoder::for_triplane(cfg, tp, &mut rng::seeded(seed))
}

fn random_triplane(c: usize, res: usize, split: usize, scale: f32, seed: u64) -> TriPlane {
    let mut r = rng::seeded(seed);
    let planes = [0, 1, 2].map(|_| Tensor::randn(&[c, res, res], &mut r).map(|v| v * scale));
    TriPlane::from_planes(planes, split).unwrap()
}

#[test]
fn zero_planes_and_zero_biases_decode_to_midgray_and_softplus_zero() {
    let tp = TriPlane::zeros(16, 8, 8, 8).unwrap();
    let mut dec = SharedDecoder::for_triplane(DecoderConfig::default(), &tp, &mut rng::seeded(0));
    dec.zero_biases();
    let (rgb, sigma) = dec.decode_point(&tp, [0.3, -0.2, 0.7]).unwrap();
    assert_eq!(rgb, [0.5; 3]);
    assert!((sigma - 2f32.ln()).abs() < 1e-6);
}

#[test]
fn origin_samples_plane_centers() {
    // A plane whose value is its texel index; the center of an even grid is
    // the average of the four middle texels.
    let (c, res) = (2, 4);
    let plane = Tensor::from_fn(&[c, res, res], |i| (i % (res * res)) as f32);
    let tp = TriPlane::from_planes([plane.clone(), plane.clone(), plane], 1).unwrap();
    let mut tape = Tape::new();
    let planes = tp.bind(&mut tape, false);
    let uv = tape.constant(Tensor::zeros(&[1, 2]));
    let center = (5.0 + 6.0 + 9.0 + 10.0) / 4.0;
    for p in planes {
        let v = tape.grid_sample_2d(p, uv).unwrap();
        assert_eq!(tape.value(v).data(), &[center, center]);
    }
}

#[test]
fn decoder_outputs_stay_in_range() {
    let tp = random_triplane(6, 8, 3, 3.0, 5);
    let dec = SharedDecoder::for_triplane(DecoderConfig::default(), &tp, &mut rng::seeded(5));
    let mut r = rng::seeded(9);
    for _ in 0..50 {
        let p = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let (rgb, sigma) = dec.decode_point(&tp, [p.data()[0], p.data()[1], p.data()[2]]).unwrap();
        assert!(rgb.iter().all(|&c| (0.0..=1.0).contains(&c)));
        assert!(sigma >= 0.0);
    }
}

fn decode_fn(dec: &SharedDecoder, xyz: Tensor, which_plane: usize, base: TriPlane) -> impl Fn(&mut Tape, &[Var]) -> Var + '_ {
    move |tape: &mut Tape, vars: &[Var]| {
        let params = dec.bind(tape, false);
        let mut planes = base.bind(tape, false);
        planes[which_plane] = vars[0];
        let (rgb, sigma) = dec.decode(tape, &params, &planes, &xyz).unwrap();
        let s = tape.reshape(sigma, &[xyz.shape()[0], 1]).unwrap();
        tape.concat(&[rgb, s], 1).unwrap()
    }
}

#[test]
fn decode_gradient_wrt_planes_matches_finite_differences() {
    for seed in 0..20u64 {
        let tp = random_triplane(4, 5, 2, 0.5, seed);
        let dec = small_decoder(&tp, seed);
        let mut r = rng::seeded(seed + 100);
        // Enough points per texel that the gradient stands well above f32 noise.
        let xyz = Tensor::uniform(&[256, 3], -0.9, 0.9, &mut r);
        let which = (seed % 3) as usize;
        let f = decode_fn(&dec, xyz, which, tp.clone());
        let err = gradient_error(&f, &[tp.planes()[which].clone()], 0, seed, H_PIPELINE);
        assert!(err < 1e-3, "seed {seed}: rel err {err}");
    }
}

#[test]
fn decode_gradient_wrt_decoder_weights_matches_finite_differences() {
    let tp = random_triplane(4, 5, 2, 0.5, 3);
    let dec = small_decoder(&tp, 3);
    let xyz = Tensor::uniform(&[64, 3], -0.9, 0.9, &mut rng::seeded(4));
    for (k, w) in dec.store.tensors().iter().enumerate() {
        let f = |tape: &mut Tape, vars: &[Var]| {
            let mut params = dec.bind(tape, false);
            let planes = tp.bind(tape, false);
            let mut store_vars: Vec<Var> = params.vars().to_vec();
            store_vars[k] = vars[0];
            params = rebind(store_vars);
            let (rgb, sigma) = dec.decode(tape, &params, &planes, &xyz).unwrap();
            let s = tape.reshape(sigma, &[64, 1]).unwrap();
            tape.concat(&[rgb, s], 1).unwrap()
        };
        let err = gradient_error(f, std::slice::from_ref(w), 0, k as u64, H_PIPELINE);
        assert!(err < 1e-3, "param {k}: rel err {err}");
    }
}

fn rebind(vars: Vec<Var>) -> trigen_core::nn::Bound {
    trigen_core::nn::Bound::from_vars(vars)
}

#[test]
fn composite_gradient_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut r = rng::seeded(seed);
        let (rays, s) = (3, 5);
        let sigma = Tensor::uniform(&[rays * s], 0.0, 3.0, &mut r);
        let rgb = Tensor::uniform(&[rays * s, 3], 0.0, 1.0, &mut r);
        let deltas: Vec<f32> = (0..rays * s).map(|_| rand::Rng::random_range(&mut r, 0.05..0.4)).collect();
        let bg = [1.0, 0.9, 0.8];
        let f = |tape: &mut Tape, v: &[Var]| composite(tape, v[0], v[1], &deltas, s, bg).unwrap();
        let inputs = [sigma, rgb];
        for which in 0..2 {
            let err = gradient_error(f, &inputs, which, seed, H);
            assert!(err < 1e-3, "seed {seed} input {which}: rel err {err}");
        }
    }
}

#[test]
fn volume_render_gradient_wrt_planes_matches_finite_differences() {
    let cam = Camera::orbit(30.0, 20.0, 12).unwrap();
    let rays = cam.rays();
    let cfg = RenderConfig::new(8);
    for seed in 0..20u64 {
        let tp = random_triplane(4, 4, 2, 0.5, seed);
        let dec = small_decoder(&tp, seed);
        let which = (seed % 3) as usize;
        let f = |tape: &mut Tape, v: &[Var]| {
            let params = dec.bind(tape, false);
            let mut planes = tp.bind(tape, false);
            planes[which] = v[0];
            render_rays::<rng::Rng, _>(tape, &rays, &cfg, None, |t, xyz| dec.decode(t, &params, &planes, xyz)).unwrap()
        };
        let err = gradient_error(f, &[tp.planes()[which].clone()], 0, seed, H_PIPELINE);
        assert!(err < 1e-3, "seed {seed}: rel err {err}");
    }
}

fn sphere_field(radius: f32, density: f32, color: [f32; 3]) -> impl FnMut(&mut Tape, &Tensor) -> trigen_stage1::Result<(Var, Var)> {
    soft_sphere_field(radius, 0.0, density, color)
}

/// Sphere whose density ramps linearly from zero to full across a shell of
/// width `edge` ending at `radius`; `edge = 0` gives a hard boundary.
fn soft_sphere_field(
    radius: f32,
    edge: f32,
    density: f32,
    color: [f32; 3],
) -> impl FnMut(&mut Tape, &Tensor) -> trigen_stage1::Result<(Var, Var)> {
    move |tape, xyz| {
        let n = xyz.shape()[0];
        let p = xyz.data();
        let sigma: Vec<f32> = (0..n)
            .map(|i| {
                let r = (p[3 * i].powi(2) + p[3 * i + 1].powi(2) + p[3 * i + 2].powi(2)).sqrt();
                if edge > 0.0 {
                    density * ((radius - r) / edge).clamp(0.0, 1.0)
                } else if r < radius {
                    density
                } else {
                    0.0
                }
            })
            .collect();
        let rgb = Tensor::new(&[n, 3], (0..n).flat_map(|_| color).collect()).unwrap();
        Ok((tape.constant(rgb), tape.constant(Tensor::new(&[n], sigma).unwrap())))
    }
}

#[test]
fn empty_field_renders_white() {
    let tp = TriPlane::zeros(4, 4, 4, 2).unwrap();
    let cam = Camera::orbit(0.0, 0.0, 16).unwrap();
    let img = render_field_image(&cam, &RenderConfig::new(8), sphere_field(0.5, 0.0, [1.0, 0.0, 0.0])).unwrap();
    assert!(img.data().iter().all(|&v| v == 1.0));
    // A decoder whose density head outputs exactly zero does the same.
    let mut dec = small_decoder(&tp, 0);
    let last = dec.store.len() - 1;
    dec.store.tensors_mut()[last].data_mut().fill(-1e4);
    let img = render_image(&tp, &dec, &cam, 8).unwrap();
    assert!(img.data().iter().all(|&v| v == 1.0));
}

#[test]
fn opaque_sphere_projects_to_predicted_disk() {
    let cam = Camera::orbit(40.0, 10.0, 64).unwrap();
    let radius = 0.6;
    let img = render_field_image(&cam, &RenderConfig::new(128), sphere_field(radius, 1e3, [1.0, 0.0, 0.0])).unwrap();
    let mut covered = 0.0f32;
    for y in 0..64 {
        for x in 0..64 {
            // Green channel is 1 on background and 0 on red; coverage is 1 − g.
            covered += 1.0 - img.pixel(x, y)[1];
        }
    }
    let measured = (covered / std::f32::consts::PI).sqrt();
    let predicted = cam.sphere_pixel_radius(radius);
    assert!((measured - predicted).abs() < 1.0, "measured {measured}, predicted {predicted}");
    let center = img.pixel(32, 32);
    assert!(center[0] > 0.99 && center[1] < 0.01);
}

#[test]
fn doubling_samples_converges_toward_reference() {
    let cam = Camera::orbit(0.0, 0.0, 48).unwrap();
    // A hard boundary makes the midpoint rule alias at first order, so the
    // shell is smooth enough for its error to shrink with n.
    let field = || soft_sphere_field(0.55, 0.15, 8.0, [0.9, 0.2, 0.1]);
    let render = |n| render_field_image(&cam, &RenderConfig::new(n), field()).unwrap();
    let (base, doubled, reference) = (render(32), render(64), render(128));
    let p_base = psnr(&base, &reference).unwrap();
    let p_doubled = psnr(&doubled, &reference).unwrap();
    assert!(p_base > 30.0, "base {p_base}");
    assert!(p_doubled > p_base - 0.5, "base {p_base}, doubled {p_doubled}");
}

#[test]
fn symmetric_field_is_invariant_under_azimuth() {
    let a = render_field_image(&Camera::orbit(0.0, 20.0, 48).unwrap(), &RenderConfig::new(64), sphere_field(0.5, 6.0, [0.2, 0.6, 0.9])).unwrap();
    let b = render_field_image(&Camera::orbit(90.0, 20.0, 48).unwrap(), &RenderConfig::new(64), sphere_field(0.5, 6.0, [0.2, 0.6, 0.9])).unwrap();
    assert!(psnr(&a, &b).unwrap() > 30.0);
}

#[test]
fn render_rejects_camera_inside_cube_and_too_few_samples() {
    let tp = TriPlane::zeros(4, 4, 4, 2).unwrap();
    let dec = small_decoder(&tp, 0);
    let inside = Camera::new(0.5, 0.0, 0.0, 49.1, 8, 8).unwrap();
    assert!(render_image(&tp, &dec, &inside, 8).is_err());
    let cam = Camera::orbit(0.0, 0.0, 8).unwrap();
    assert!(render_image(&tp, &dec, &cam, 1).is_err());
}

#[test]
fn camera_validation() {
    assert!(Camera::new(0.0, 0.0, 0.0, 49.1, 8, 8).is_err());
    assert!(Camera::new(2.5, 0.0, 0.0, 120.0, 8, 8).is_err());
    assert!(Camera::new(2.5, 0.0, 0.0, 0.0, 8, 8).is_err());
    let cam = Camera::orbit(10.0, 20.0, 32).unwrap();
    // The center ray points at the origin.
    let (px, py) = cam.project([0.0; 3]).unwrap();
    assert!((px - 16.0).abs() < 1e-4 && (py - 16.0).abs() < 1e-4);
}

#[test]
fn clamp_examples() {
    let p = Tensor::new(&[2, 1, 2], vec![7.0, -7.0, 3.0, 0.0]).unwrap();
    let tp = TriPlane::from_planes([p.clone(), p.clone(), p], 1).unwrap();
    let c = clamp_triplane(&tp);
    assert_eq!(c.planes()[0].data(), &[5.0, -5.0, 3.0, 0.0]);
}

fn brute_tv(p: &Tensor) -> f64 {
    let (c, w, h) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let at = |ch: usize, i: usize, j: usize| p.data()[ch * w * h + i * h + j] as f64;
    let (mut a, mut na, mut b, mut nb) = (0.0, 0, 0.0, 0);
    for ch in 0..c {
        for i in 0..w {
            for j in 0..h {
                if i + 1 < w {
                    a += (at(ch, i + 1, j) - at(ch, i, j)).powi(2);
                    na += 1;
                }
                if j + 1 < h {
                    b += (at(ch, i, j + 1) - at(ch, i, j)).powi(2);
                    nb += 1;
                }
            }
        }
    }
    a / na as f64 + b / nb as f64
}

#[test]
fn tv_matches_brute_force_on_4x4() {
    let tp = random_triplane(2, 4, 1, 1.0, 77);
    let expected: f64 = tp.planes().iter().map(brute_tv).sum();
    assert!((tv_loss(&tp) as f64 - expected).abs() < 1e-6 * expected.max(1.0));
    let mut tape = Tape::new();
    let planes = tp.bind(&mut tape, false);
    let v = tv_loss_var(&mut tape, &planes).unwrap();
    assert!((tape.value(v).item() as f64 - expected).abs() < 1e-5 * expected.max(1.0));
}

#[test]
fn tv_is_zero_on_constant_planes_and_quadratic_in_spike_height() {
    let c = TriPlane::from_planes([0, 1, 2].map(|_| Tensor::full(&[2, 4, 4], 1.5)), 1).unwrap();
    assert_eq!(tv_loss(&c), 0.0);
    let spike = |h: f32| {
        let mut p = Tensor::zeros(&[1, 4, 4]);
        p.data_mut()[5] = h;
        let z = Tensor::zeros(&[2, 4, 4]);
        let mut full = Tensor::zeros(&[2, 4, 4]);
        full.data_mut()[..16].copy_from_slice(p.data());
        tv_loss(&TriPlane::from_planes([full, z.clone(), z], 1).unwrap())
    };
    assert!(spike(1.0) > 0.0);
    assert!((spike(3.0) / spike(1.0) - 9.0).abs() < 1e-5);
}

#[test]
fn l1_examples_and_brute_force() {
    let z = TriPlane::zeros(2, 3, 3, 1).unwrap();
    assert_eq!(l1_loss(&z), 0.0);
    let twos = TriPlane::from_planes([0, 1, 2].map(|_| Tensor::full(&[2, 3, 3], -2.0)), 1).unwrap();
    assert_eq!(l1_loss(&twos), 2.0);
    let tp = random_triplane(3, 4, 1, 1.0, 8);
    let (mut s, mut n) = (0.0f64, 0usize);
    for p in tp.planes() {
        for &v in p.data() {
            s += v.abs() as f64;
            n += 1;
        }
    }
    assert!((l1_loss(&tp) as f64 - s / n as f64).abs() < 1e-6);
}

#[test]
fn triplane_persists_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tp.ttns");
    let tp = random_triplane(4, 6, 2, 1.0, 3);
    tp.save(&path).unwrap();
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("tp.json")).unwrap()).unwrap();
    assert_eq!(side["meta"]["channels"], 4);
    assert_eq!(side["meta"]["split"], 2);
    assert_eq!(side["meta"]["resolution"], serde_json::json!([6, 6]));
    assert_eq!(TriPlane::load(&path).unwrap(), tp);
}

#[test]
fn decoder_persists() {
    let dir = tempfile::tempdir().unwrap();
    let tp = random_triplane(4, 6, 2, 1.0, 3);
    let dec = small_decoder(&tp, 4);
    dec.save(dir.path().join("dec.ttns")).unwrap();
    let back = SharedDecoder::load(dir.path().join("dec.ttns")).unwrap();
    assert_eq!(back.store, dec.store);
    assert_eq!(back.decode_point(&tp, [0.1, 0.2, 0.3]).unwrap(), dec.decode_point(&tp, [0.1, 0.2, 0.3]).unwrap());
}

#[test]
fn decode_is_continuous_for_smooth_planes() {
    // Smooth planes: low-frequency sinusoids.
    let res = 16;
    let make = |phase: f32| {
        Tensor::from_fn(&[4, res, res], |i| {
            let (w, h) = ((i / res) % res, i % res);
            (w as f32 * 0.3 + phase).sin() * (h as f32 * 0.2).cos()
        })
    };
    let tp = TriPlane::from_planes([make(0.0), make(1.0), make(2.0)], 2).unwrap();
    let dec = SharedDecoder::for_triplane(DecoderConfig::default(), &tp, &mut rng::seeded(1));
    let mut r = rng::seeded(2);
    for _ in 0..50 {
        let p = Tensor::uniform(&[3], -0.95, 0.95, &mut r);
        let a = [p.data()[0], p.data()[1], p.data()[2]];
        let b = [a[0] + 1e-4, a[1] - 1e-4, a[2] + 1e-4];
        let (ca, sa) = dec.decode_point(&tp, a).unwrap();
        let (cb, sb) = dec.decode_point(&tp, b).unwrap();
        assert!((0..3).all(|i| (ca[i] - cb[i]).abs() < 1e-2));
        assert!((sa - sb).abs() < 1e-2);
    }
}

proptest! {
    #[test]
    fn clamp_is_idempotent_and_bounded(values in proptest::collection::vec(-20.0f32..20.0, 3 * 2 * 2 * 2)) {
        let planes = [0, 1, 2].map(|k| Tensor::new(&[2, 2, 2], values[k * 8..(k + 1) * 8].to_vec()).unwrap());
        let tp = TriPlane::from_planes(planes, 1).unwrap();
        let once = clamp_triplane(&tp);
        prop_assert!(once.max_abs() <= PLANE_CLAMP);
        prop_assert_eq!(clamp_triplane(&once), once);
    }

    #[test]
    fn regularizers_are_nonnegative(seed in 0u64..500, scale in 0.0f32..4.0) {
        let tp = random_triplane(2, 3, 1, scale, seed);
        prop_assert!(tv_loss(&tp) >= 0.0);
        prop_assert!(l1_loss(&tp) >= 0.0);
        if scale > 0.0 {
            prop_assert!(l1_loss(&tp) > 0.0);
            prop_assert!(tv_loss(&tp) > 0.0);
        }
    }
}



