use trigen_core::vec3::{dot, normalize};
use trigen_core::Tensor;
use trigen_refine::hashgrid::{HashGridConfig, HashGridTexture};
use trigen_refine::pipeline::{refine_pipeline, AnalyticPriors, Priors, RefineConfig};
use trigen_refine::raster::{image_to_chw, render_vertex_colors};
use trigen_refine::score::{Codec, IdentityCodec, NoiseEcho, PoolCodec, ScoreMode, ViewAnalyticPrior};
use trigen_refine::sds::{
    sample_timestep, sds_latent_step, sds_pixel_step, texture_distill_init, view_direction, LearningRates, Prompts, RefineState,
    SdsConfig, Weighting, NEGATIVE_PROMPT, POSITIVE_SUFFIX,
};
use trigen_refine::{Mesh, RefineError, SdfGrid};
use trigen_stage1::diffusion::NoiseSchedule;
use trigen_stage1::synthdata::{render_gt, NamedColor, ProceduralObject};
use trigen_stage1::{Camera, Image};

const CONVERGENCE_MAE: f32 = 0.1;
const DISTILL_MAE: f32 = 0.05;
const WINDOW_JITTER: f32 = 0.01;

fn small_hash() -> HashGridConfig {
    HashGridConfig {
        levels: 6,
        log2_table_size: 12,
        max_resolution: 64,
        ..HashGridConfig::default()
    }
}

/// Half-space whose boundary plane faces `cam`, filling its view.
fn quad_state(cam: &Camera) -> RefineState {
    let d = normalize(cam.position());
    let grid = SdfGrid::from_fn(12, [-2.0; 3], [2.0; 3], |p| dot(p, d)).unwrap();
    let tex = HashGridTexture::new(small_hash(), grid.min, grid.max, 7).unwrap();
    RefineState::new(grid, tex, LearningRates::default())
}

fn mae(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.numel() as f32
}

fn blue(cam: &Camera) -> Tensor {
    image_to_chw(&Image::filled(cam.width, cam.height, NamedColor::Blue.rgb()))
}

fn no_geometry() -> SdsConfig {
    SdsConfig {
        train_geometry: false,
        ..SdsConfig::default()
    }
}

#[test]
fn timesteps_stay_inside_the_configured_range() {
    let mut r = trigen_core::rng::seeded(1);
    let ts: Vec<usize> = (0..20_000).map(|_| sample_timestep(&mut r, 1000, (0.02, 0.98))).collect();
    let (lo, hi) = (*ts.iter().min().unwrap(), *ts.iter().max().unwrap());
    assert!(lo >= 20 && hi <= 980, "{lo}..{hi}");
    assert!(lo <= 22 && hi >= 978, "{lo}..{hi}");
    assert_eq!(SdsConfig::default().t_range, (0.02, 0.98));
}

#[test]
fn prompts_carry_direction_and_fixed_suffixes() {
    assert_eq!(view_direction(0.0), "front");
    assert_eq!(view_direction(-45.0), "front");
    assert_eq!(view_direction(90.0), "side");
    assert_eq!(view_direction(270.0), "side");
    assert_eq!(view_direction(180.0), "back");
    assert_eq!(view_direction(-150.0), "back");
    let p = Prompts::new("a red chair");
    assert_eq!(
        p.positive(100.0),
        "a red chair, side view, best quality, extremely detailed, masterpiece, high resolution, high quality"
    );
    assert_eq!(p.negative, "blur, lowres, cropped, low quality, worst quality, ugly, dark, shadow, oversaturated");
    assert_eq!(POSITIVE_SUFFIX.split(", ").count(), 5);
    assert_eq!(NEGATIVE_PROMPT.split(", ").count(), 9);
    let (front, _) = p.embeddings(0.0);
    let (back, _) = p.embeddings(180.0);
    assert_ne!(front, back);
}

#[test]
fn default_learning_rates() {
    let lr = LearningRates::default();
    assert_eq!((lr.hash_grid, lr.mlp, lr.geometry), (0.01, 0.001, 1e-4));
}

#[test]
fn echoed_noise_is_a_fixed_point() {
    let cam = Camera::orbit(0.0, 0.0, 16).unwrap();
    let mut state = quad_state(&cam);
    let before = state.clone();
    let echo = NoiseEcho {
        mode: ScoreMode::Latent,
        schedule: NoiseSchedule::default_linear(),
    };
    for s in 0..5 {
        let r = sds_latent_step(&mut state, &echo, &Prompts::new("x"), &SdsConfig::default(), &[cam], s).unwrap();
        assert_eq!(r.grad_norm, 0.0);
    }
    assert_eq!(state.texture.tables, before.texture.tables);
    assert_eq!(state.texture.head_store, before.texture.head_store);
    assert_eq!(state.grid.values, before.grid.values);
    assert_eq!(state.grid.offsets, before.grid.offsets);
    assert_eq!(state.iteration, 5);
}

#[test]
fn zero_weight_changes_nothing() {
    let cam = Camera::orbit(0.0, 0.0, 16).unwrap();
    let mut state = quad_state(&cam);
    let before = state.clone();
    let prior = ViewAnalyticPrior::pixel(vec![(cam, blue(&cam))], 0.0, NoiseSchedule::default_linear()).unwrap();
    let cfg = SdsConfig {
        weighting: Weighting::Constant(0.0),
        ..SdsConfig::default()
    };
    for s in 0..5 {
        sds_pixel_step(&mut state, &prior, &Prompts::new("x"), &cfg, &[cam], s).unwrap();
    }
    assert_eq!(state.texture.tables, before.texture.tables);
    assert_eq!(state.texture.head_store, before.texture.head_store);
    assert_eq!(state.grid.values, before.grid.values);
}

fn converge(mode: ScoreMode, steps: usize) -> Vec<f32> {
    let cam = Camera::orbit(0.0, 0.0, 32).unwrap();
    let mut state = quad_state(&cam);
    let target = blue(&cam);
    let sched = NoiseSchedule::default_linear();
    let prior = match mode {
        ScoreMode::Latent => ViewAnalyticPrior::latent(vec![(cam, target.clone())], 0.0, sched, Box::new(IdentityCodec)).unwrap(),
        ScoreMode::PixelSuperRes => ViewAnalyticPrior::pixel(vec![(cam, target.clone())], 0.0, sched).unwrap(),
    };
    let prompts = Prompts::new("a blue quad");
    let mut errs = vec![mae(&state.render_tensor(&cam).unwrap(), &target)];
    for s in 0..steps {
        let r = match mode {
            ScoreMode::Latent => sds_latent_step(&mut state, &prior, &prompts, &no_geometry(), &[cam], 42),
            ScoreMode::PixelSuperRes => sds_pixel_step(&mut state, &prior, &prompts, &no_geometry(), &[cam], 42),
        }
        .unwrap();
        assert!(!r.skipped);
        if (s + 1) % 50 == 0 {
            errs.push(mae(&state.render_tensor(&cam).unwrap(), &target));
        }
    }
    errs
}

fn check_convergence(errs: &[f32]) {
    for w in errs.windows(2) {
        assert!(w[1] <= w[0] + WINDOW_JITTER, "error rose across a window: {errs:?}");
    }
    let last = *errs.last().unwrap();
    assert!(last < CONVERGENCE_MAE, "final error {last}, trajectory {errs:?}");
}

#[test]
fn latent_distillation_drives_quad_to_target() {
    check_convergence(&converge(ScoreMode::Latent, 300));
}

#[test]
fn pixel_distillation_drives_quad_to_target() {
    check_convergence(&converge(ScoreMode::PixelSuperRes, 300));
}

#[test]
fn coarse_render_uses_frozen_snapshot() {
    let cam = Camera::orbit(0.0, 0.0, 16).unwrap();
    let mut state = quad_state(&cam);
    let initial = state.render_tensor(&cam).unwrap();
    let prior = ViewAnalyticPrior::pixel(vec![(cam, blue(&cam))], 0.0, NoiseSchedule::default_linear()).unwrap();
    for s in 0..20 {
        sds_pixel_step(&mut state, &prior, &Prompts::new("x"), &no_geometry(), &[cam], s).unwrap();
    }
    assert_ne!(state.render_tensor(&cam).unwrap(), initial);
    assert_eq!(state.render_coarse_tensor(&cam).unwrap(), initial);
}

#[test]
fn wrong_prior_mode_is_rejected() {
    let cam = Camera::orbit(0.0, 0.0, 8).unwrap();
    let mut state = quad_state(&cam);
    let pixel = ViewAnalyticPrior::pixel(vec![(cam, blue(&cam))], 0.0, NoiseSchedule::default_linear()).unwrap();
    assert!(sds_latent_step(&mut state, &pixel, &Prompts::new("x"), &SdsConfig::default(), &[cam], 0).is_err());
}

fn sphere_views(color: NamedColor, size: usize) -> Vec<(Camera, Image)> {
    let obj = ProceduralObject::sphere(0.5, color);
    [0.0, 90.0, 180.0, 270.0, 45.0, 225.0]
        .iter()
        .map(|&az| {
            let cam = Camera::orbit(az, 15.0, size).unwrap();
            (cam, render_gt(&obj, &cam).unwrap())
        })
        .collect()
}

fn sphere_state() -> RefineState {
    let grid = SdfGrid::sphere(20, 0.5, 0.8).unwrap();
    let tex = HashGridTexture::new(small_hash(), grid.min, grid.max, 3).unwrap();
    RefineState::new(grid, tex, LearningRates::default())
}

/// Unshaded renders of the state's own surface in one flat color.
fn flat_views(state: &RefineState, rgb: [f32; 3], size: usize) -> Vec<(Camera, Image)> {
    let m = state.mesh();
    let colors = vec![rgb; m.vertices.len()];
    [0.0, 90.0, 180.0, 270.0, 45.0, 225.0]
        .iter()
        .map(|&az| {
            let cam = Camera::orbit(az, 15.0, size).unwrap();
            (cam, render_vertex_colors(&m.vertices, &m.faces, &colors, &cam).unwrap())
        })
        .collect()
}

#[test]
fn texture_distillation_reproduces_uniform_color() {
    let mut state = sphere_state();
    let views = flat_views(&state, NamedColor::Green.rgb(), 24);
    texture_distill_init(&mut state, &views, 300, 5).unwrap();
    let green = NamedColor::Green.rgb();
    let mut worst = 0.0f32;
    for (cam, _) in &views {
        let img = trigen_refine::render_refined(&state, cam).unwrap();
        let frags = trigen_refine::raster::rasterize(&state.mesh().vertices, &state.mesh().faces, cam);
        let (mut err, mut n) = (0.0f32, 0usize);
        for &p in &frags.pixels {
            for (ch, g) in green.iter().enumerate() {
                err += (img.data()[p * 3 + ch] - g).abs();
            }
            n += 3;
        }
        worst = worst.max(err / n as f32);
    }
    assert!(worst < DISTILL_MAE, "mean error to green {worst}");
}

#[test]
fn texture_distillation_edge_cases() {
    let views = sphere_views(NamedColor::Green, 8);
    let mut state = sphere_state();
    let before = state.texture.tables.clone();
    assert!(texture_distill_init(&mut state, &views, 0, 1).unwrap().is_nan());
    assert_eq!(state.texture.tables, before);
    assert!(matches!(texture_distill_init(&mut state, &views[..3], 5, 1), Err(RefineError::Config(_))));
    assert_eq!(RefineConfig::default().distill_iters, 512);
}

#[test]
fn geometry_updates_keep_the_surface_extractable() {
    let views = sphere_views(NamedColor::Red, 16);
    let mut state = sphere_state();
    let prior = AnalyticPriors::from_views(&views, 0, 1).unwrap();
    let cams: Vec<Camera> = views.iter().map(|(c, _)| *c).collect();
    let before = state.grid.values.clone();
    for s in 0..30 {
        sds_pixel_step(&mut state, &prior.pixel, &Prompts::new("x"), &SdsConfig::default(), &cams, s).unwrap();
        let m = state.mesh();
        assert!(!m.is_empty());
        assert_eq!(m.euler_characteristic(), 2);
    }
    assert_ne!(state.grid.values, before, "geometry never moved");
    let half = state.grid.max_offset();
    assert!(state.grid.offsets.data().iter().all(|o| o.abs() <= half));
}

#[test]
fn pool_codec_shapes_and_training() {
    let views = sphere_views(NamedColor::Yellow, 16);
    let imgs: Vec<Tensor> = views.iter().map(|(_, i)| image_to_chw(i)).collect();
    let mut codec = PoolCodec::new(0);
    let z = codec.encode_value(&imgs[0]).unwrap();
    assert_eq!(z.shape(), &[PoolCodec::LATENT_CHANNELS, 4, 4]);
    assert_eq!(codec.decode(&z).unwrap().shape(), &[3, 16, 16]);
    let first = codec.clone().train(&imgs, 1, 1e-2).unwrap();
    let last = codec.train(&imgs, 200, 1e-2).unwrap();
    assert!(last < first, "{first} -> {last}");
}

fn tiny_pipeline_cfg() -> RefineConfig {
    RefineConfig {
        sdf_resolution: 20,
        render_size: 24,
        hash: small_hash(),
        distill_iters: 60,
        latent_iters: 20,
        pixel_iters: 20,
        max_faces: 400,
        ..RefineConfig::default()
    }
}

#[test]
fn pipeline_on_sphere_yields_closed_colored_mesh() {
    let views = sphere_views(NamedColor::Blue, 24);
    let priors = AnalyticPriors::from_views(&views, 30, 2).unwrap();
    let mesh = Mesh::icosphere(0.5, 3);
    let out = refine_pipeline(&mesh, &views, "a blue ball", &tiny_pipeline_cfg(), &priors.priors()).unwrap();
    assert_eq!(out.report.euler_characteristic, 2);
    assert_eq!(out.mesh.euler_characteristic(), 2);
    assert!(out.mesh.is_watertight());
    assert!(out.mesh.num_faces() <= 400);
    assert_eq!(out.report.latent_steps, 20);
    assert_eq!(out.report.pixel_steps, 20);
    let colors = out.mesh.colors.as_ref().unwrap();
    assert_eq!(colors.len(), out.mesh.vertices.len());
    let mean_b = colors.iter().map(|c| c[2]).sum::<f32>() / colors.len() as f32;
    let mean_r = colors.iter().map(|c| c[0]).sum::<f32>() / colors.len() as f32;
    assert!(mean_b > mean_r, "baked colors not blue-dominant");
}

#[test]
fn pipeline_can_skip_latent_phase_and_tags_failures() {
    let views = sphere_views(NamedColor::Blue, 12);
    let priors = AnalyticPriors::from_views(&views, 0, 2).unwrap();
    let cfg = RefineConfig {
        render_size: 12,
        skip_latent: true,
        distill_iters: 5,
        pixel_iters: 3,
        ..tiny_pipeline_cfg()
    };
    let only_pixel = Priors {
        latent: None,
        pixel: &priors.pixel,
    };
    let out = refine_pipeline(&Mesh::icosphere(0.5, 2), &views, "ball", &cfg, &only_pixel).unwrap();
    assert_eq!(out.report.latent_steps, 0);

    let empty = Mesh::new(vec![], vec![]).unwrap();
    match refine_pipeline(&empty, &views, "ball", &cfg, &only_pixel) {
        Err(RefineError::Stage { stage, .. }) => assert_eq!(stage, "remove_floaters"),
        other => panic!("expected a stage error, got {:?}", other.err()),
    }
    let wrong_size = RefineConfig {
        render_size: 16,
        ..cfg.clone()
    };
    match refine_pipeline(&Mesh::icosphere(0.5, 2), &views, "ball", &wrong_size, &only_pixel) {
        Err(RefineError::Stage { stage, .. }) => assert_eq!(stage, "texture_distill"),
        other => panic!("expected a stage error, got {:?}", other.err()),
    }
    let no_latent = RefineConfig {
        skip_latent: false,
        ..cfg
    };
    match refine_pipeline(&Mesh::icosphere(0.5, 2), &views, "ball", &no_latent, &only_pixel) {
        Err(RefineError::Stage { stage, .. }) => assert_eq!(stage, "latent_sds"),
        other => panic!("expected a stage error, got {:?}", other.err()),
    }
}

#[test]
fn budgets_follow_profiles() {
    assert_eq!(RefineConfig::default().max_faces, 5_000);
    assert_eq!(RefineConfig::paper().max_faces, 50_000);
    assert_eq!(RefineConfig::paper().sdf_resolution, 128);
    assert_eq!(RefineConfig::default().sdf_resolution, 32);
    let d = RefineConfig::default();
    assert_eq!((d.latent_iters, d.pixel_iters), (800, 400));
}
