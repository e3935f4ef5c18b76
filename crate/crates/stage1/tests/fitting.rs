use trigen_core::{rng, Tape, Tensor};
use trigen_stage1::camera::Camera;
use trigen_stage1::fitting::*;
use trigen_stage1::image::Image;
use trigen_stage1::render::{render_image, render_rays, RenderConfig};
use trigen_stage1::synthdata::{render_sample, sample_cameras, NamedColor, Primitive, ProceduralObject};
use trigen_stage1::triplane::{DecoderConfig, SharedDecoder, TriPlane};
use trigen_stage1::Error;

fn tiny_cfg(steps: usize) -> FitConfig {
    FitConfig {
        steps,
        rays_per_batch: 128,
        n_samples: 16,
        objects_per_step: 2,
        triplane: TriPlaneShape {
            channels: 8,
            resolution: 16,
            color_channels: 4,
        },
        decoder: DecoderConfig {
            hidden: 16,
            hidden_layers: 2,
            ..DecoderConfig::default()
        },
        ..FitConfig::default()
    }
}

fn sample_of(obj: &ProceduralObject, id: &str, views: usize, seed: u64) -> MultiViewSample {
    let cams = sample_cameras(views, 32, &mut rng::seeded(seed)).unwrap();
    render_sample(id, obj, &cams).unwrap()
}

#[test]
fn psnr_closed_forms() {
    let a = Image::filled(4, 4, [0.0; 3]);
    assert!(psnr(&a, &a).unwrap() >= 100.0);
    let b = Image::filled(4, 4, [0.1; 3]);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    let c = Image::filled(4, 4, [0.5; 3]);
    assert!((psnr(&a, &c).unwrap() - 6.0206).abs() < 1e-3);
    assert!(psnr(&a, &Image::filled(4, 3, [0.0; 3])).is_err());
}

#[test]
fn fit_loss_zero_case_and_degenerate_weights() {
    let tp = TriPlane::zeros(4, 4, 4, 2).unwrap();
    let gt = Tensor::uniform(&[5, 3], 0.0, 1.0, &mut rng::seeded(1));
    let mut tape = Tape::new();
    let planes = tp.bind(&mut tape, false);
    let a = tape.constant(gt.clone());
    let b = tape.constant(gt.clone());
    let l = fit_loss(&mut tape, a, b, &planes, 2e-3, 1e-4).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let pred = Tensor::uniform(&[5, 3], 0.0, 1.0, &mut rng::seeded(2));
    let tp = TriPlane::from_planes([0, 1, 2].map(|_| Tensor::randn(&[4, 4, 4], &mut rng::seeded(3))), 2).unwrap();
    let mut tape = Tape::new();
    let planes = tp.bind(&mut tape, false);
    let (p, g) = (tape.constant(pred.clone()), tape.constant(gt.clone()));
    let l = fit_loss(&mut tape, p, g, &planes, 0.0, 0.0).unwrap();
    let pixel_sq: f64 = (0..5)
        .map(|i| (0..3).map(|c| ((pred.data()[3 * i + c] - gt.data()[3 * i + c]) as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        / 5.0;
    assert!((tape.value(l).item() as f64 - pixel_sq).abs() < 1e-6);
}

#[test]
fn fit_loss_on_hand_computed_2x2_image() {
    // pred and gt differ by (0.1, 0, 0) at one pixel and (0, 0.2, 0.2) at another.
    let gt = Tensor::new(&[4, 3], vec![0.5; 12]).unwrap();
    let mut pred = gt.clone();
    pred.data_mut()[0] = 0.6;
    pred.data_mut()[10] = 0.7;
    pred.data_mut()[11] = 0.7;
    // One plane holds a single 1.0 among 2×2×2 zeros; the others are zero.
    let mut p = Tensor::zeros(&[2, 2, 2]);
    p.data_mut()[0] = 1.0;
    let z = Tensor::zeros(&[2, 2, 2]);
    let tp = TriPlane::from_planes([p, z.clone(), z], 1).unwrap();
    // color: (0.01 + 0.08) / 4 pixels; TV: one of four W-differences and one
    // of four H-differences is 1 → 0.25 + 0.25; L1: 1 / 24.
    let expected = 0.09 / 4.0 + 2e-3 * 0.5 + 1e-4 / 24.0;
    let value = fit_loss_value(&pred, &gt, &tp, 2e-3, 1e-4).unwrap();
    assert!((value as f64 - expected).abs() < 1e-7, "{value} vs {expected}");
    let mut tape = Tape::new();
    let planes = tp.bind(&mut tape, false);
    let (a, b) = (tape.constant(pred), tape.constant(gt));
    let l = fit_loss(&mut tape, a, b, &planes, 2e-3, 1e-4).unwrap();
    assert!((tape.value(l).item() as f64 - expected).abs() < 1e-7);
}

#[test]
fn multiview_sample_validation() {
    let cam = Camera::orbit(0.0, 0.0, 32).unwrap();
    let img = Image::filled(32, 32, [1.0; 3]);
    assert!(MultiViewSample::new("a", vec![(cam, img.clone())], None).is_err());
    let other = Image::filled(16, 16, [1.0; 3]);
    assert!(MultiViewSample::new("a", vec![(cam, img.clone()), (cam, other)], None).is_err());
    assert!(MultiViewSample::new("a", vec![(cam, img.clone()), (cam, img)], None).is_ok());
}

#[test]
fn shared_training_descends_on_two_objects() {
    let a = sample_of(&ProceduralObject::sphere(0.5, NamedColor::Red), "a", 4, 1);
    let b = sample_of(
        &ProceduralObject::single(Primitive::Box { half: [0.4, 0.3, 0.35] }, NamedColor::Blue, 0),
        "b",
        4,
        2,
    );
    let fit = train_shared_decoder(&[a, b], &tiny_cfg(500)).unwrap();
    let head: f32 = fit.losses[..20].iter().sum::<f32>() / 20.0;
    let tail: f32 = fit.losses[fit.losses.len() - 20..].iter().sum::<f32>() / 20.0;
    assert!(tail < head, "head {head}, tail {tail}");
    assert!(fit.triplanes.iter().all(|tp| tp.max_abs() <= 5.0));
}

#[test]
fn white_scene_is_reproduced() {
    let white = ProceduralObject::empty(0);
    let data = [sample_of(&white, "a", 3, 1), sample_of(&white, "b", 3, 2)];
    let fit = train_shared_decoder(&data, &tiny_cfg(50)).unwrap();
    for (tp, s) in fit.triplanes.iter().zip(&data) {
        for (cam, gt) in &s.views {
            let img = render_image(tp, &fit.decoder, cam, 16).unwrap();
            let worst = img.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(worst < 0.05, "worst pixel error {worst}");
        }
    }
}

#[test]
fn shared_training_needs_two_objects() {
    let a = sample_of(&ProceduralObject::sphere(0.5, NamedColor::Red), "a", 2, 1);
    assert!(matches!(train_shared_decoder(&[a], &tiny_cfg(1)), Err(Error::Config(_))));
}

#[test]
fn divergence_is_reported() {
    let a = sample_of(&ProceduralObject::sphere(0.5, NamedColor::Red), "a", 2, 1);
    let b = sample_of(&ProceduralObject::sphere(0.4, NamedColor::Green), "b", 2, 2);
    let mut cfg = tiny_cfg(5);
    cfg.lr_planes = f32::NAN;
    assert!(matches!(train_shared_decoder(&[a, b], &cfg), Err(Error::Diverged { .. })));
}

#[test]
fn fit_object_keeps_decoder_and_zero_steps_returns_init() {
    let s = sample_of(&ProceduralObject::sphere(0.5, NamedColor::Red), "a", 3, 1);
    let cfg = tiny_cfg(0);
    let tp = cfg.triplane.zeros().unwrap();
    let dec = SharedDecoder::for_triplane(cfg.decoder.clone(), &tp, &mut rng::seeded(0));
    let before = dec.store.clone();
    let fit = fit_object(&s, &dec, &cfg).unwrap();
    assert_eq!(fit.triplane, tp);
    let fit = fit_object(&s, &dec, &tiny_cfg(30)).unwrap();
    assert_eq!(dec.store, before);
    assert_ne!(fit.triplane, tp);
    assert!(fit.triplane.max_abs() <= 5.0);
}

/// Full-batch loss and plane gradients with deterministic midpoint samples.
fn full_batch(tp: &TriPlane, dec: &SharedDecoder, views: &[(Camera, Image)]) -> (f32, [Tensor; 3]) {
    let mut tape = Tape::new();
    let params = dec.bind(&mut tape, false);
    let planes = tp.bind(&mut tape, true);
    let mut total = None;
    for (cam, gt) in views {
        let rays = cam.rays();
        let pred = render_rays::<rng::Rng, _>(&mut tape, &rays, &RenderConfig::new(8), None, |t, x| {
            dec.decode(t, &params, &planes, x)
        })
        .unwrap();
        let g = tape.constant(gt.to_tensor());
        let l = fit_loss(&mut tape, pred, g, &planes, 2e-3, 1e-4).unwrap();
        total = Some(match total {
            Some(t) => tape.add(t, l).unwrap(),
            None => l,
        });
    }
    let total = total.unwrap();
    let value = tape.value(total).item();
    let grads = tape.backward(total).unwrap();
    (value, planes.map(|p| grads.wrt(p)))
}

#[test]
fn full_batch_gradient_descent_is_monotone() {
    let obj = ProceduralObject::sphere(0.55, NamedColor::Green);
    let views: Vec<_> = [0.0f32, 120.0]
        .iter()
        .map(|&az| {
            let cam = Camera::orbit(az, 15.0, 8).unwrap();
            (cam, trigen_stage1::synthdata::render_gt(&obj, &cam).unwrap())
        })
        .collect();
    let mut tp = TriPlane::zeros(4, 6, 6, 2).unwrap();
    let dec = SharedDecoder::for_triplane(
        DecoderConfig {
            hidden: 8,
            hidden_layers: 2,
            ..DecoderConfig::default()
        },
        &tp,
        &mut rng::seeded(7),
    );
    let lr = 0.05;
    let mut last = f32::INFINITY;
    for step in 0..40 {
        let (loss, grads) = full_batch(&tp, &dec, &views);
        assert!(loss <= last, "step {step}: {loss} > {last}");
        last = loss;
        for (p, g) in tp.planes_mut().iter_mut().zip(&grads) {
            for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * d;
            }
        }
    }
}
