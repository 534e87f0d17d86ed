//! Library-level runs from synthetic scenes to stage-2 output.

use placido::classify::{classify_cornea, extract_dims};
use placido::localize::{locate_hotspot, render_colormap, ColorWindow, LogisticModel, MISSING_COLOR};
use placido::pipeline::{
    fit_stage_models, measure_preprocessed, measure_scene, preprocess_mask, train_segmenter,
    PipelineConfig,
};
use placido::raster::RasterImage;
use placido::stats::{compare, format_p, GroupSample};
use placido::synth::{make_corpus, render_mask, SceneSpec, KC_SQUASH_Y};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kc_spec(angle: f64, tilt: f64) -> SceneSpec {
    SceneSpec {
        protrusion_amplitude: 0.5,
        protrusion_angle: angle,
        squash_y: KC_SQUASH_Y,
        tilt,
        ..SceneSpec::default()
    }
}

fn measure_noiseless(spec: &SceneSpec) -> placido::pipeline::SceneMeasurement {
    let mask = render_mask(spec).unwrap();
    let image = RasterImage::new(mask.width(), mask.height()).unwrap();
    let config = PipelineConfig::default();
    let prep = preprocess_mask(&image, &mask, &config).unwrap();
    measure_preprocessed("noiseless", &prep, &config).unwrap()
}

#[test]
fn kc_mask_reproduces_gap_field_in_leveled_frame() {
    let spec = kc_spec(70.0, 0.0);
    let m = measure_noiseless(&spec);
    // The bump biases the moment estimate, so the leveled frame is turned
    // by the estimated angle relative to the pattern frame.
    let est = m.orientation.angle;
    assert!(est.abs() > 0.5, "expected a biased estimate, got {est}");
    let mut worst = 0.0f64;
    for (r, &angle) in m.matrix.angles.iter().enumerate() {
        for g in 0..spec.gap_count() {
            if let Some(d) = m.matrix.get(r, g) {
                worst = worst.max((d - spec.gap_field(angle - est, g)).abs());
            }
        }
    }
    assert!(worst <= 1.5, "worst gap error {worst}");
}

#[test]
fn tilt_is_recovered_on_control_masks() {
    for tilt in [-15.0, -5.0, 8.0, 18.0] {
        let spec = SceneSpec { tilt, ..SceneSpec::default() };
        let m = measure_noiseless(&spec);
        assert!((m.orientation.angle - tilt).abs() < 1.0, "tilt {tilt}: {}", m.orientation.angle);
    }
}

#[test]
fn hotspot_peak_follows_protrusion_angle() {
    // Boundary halfway between the control gap and the bump's peak gap.
    let model = LogisticModel { beta0: -0.5 * 46.0, beta1: 0.5 };
    for angle in [55.0, 90.0, 125.0] {
        let m = measure_noiseless(&kc_spec(angle, 0.0));
        let h = locate_hotspot(&m.matrix, &model);
        let peak = h.peak_angle.expect("nonempty hotspot");
        assert!((peak - angle).abs() <= 10.0, "angle {angle}: peak {peak}");
    }
    let control = measure_noiseless(&SceneSpec::default());
    assert!(locate_hotspot(&control.matrix, &model).is_empty());
}

#[test]
fn small_corpus_trains_and_separates() {
    let base = SceneSpec {
        image_size: 512,
        center: (256.0, 300.0),
        base_gap: 20.0,
        ring_thickness: 6.0,
        ..SceneSpec::default()
    };
    let scenes = make_corpus(3, 3, &base, 11).unwrap();
    let config = PipelineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tree = train_segmenter(
        scenes.iter().map(|s| (s.id.as_str(), &s.image, &s.mask)),
        &config,
        &mut rng,
    )
    .unwrap();
    let ms: Vec<_> = scenes
        .iter()
        .map(|s| (measure_scene(&s.id, &s.image, &tree, &config).unwrap(), s.truth.label))
        .collect();
    let models = fit_stage_models(&ms, &config, &mut rng).unwrap();
    let correct = ms
        .iter()
        .filter(|(m, l)| classify_cornea(&models.kmeans.model, &m.dims).label == *l)
        .count();
    assert_eq!(correct, ms.len());
    assert!(models.logistic.model.beta1 > 0.0);

    let heat = render_colormap(&ms[4].0.matrix, &models.window, 96);
    assert_eq!(heat.width(), 96);
    let m = &ms[4].0.matrix;
    let complete = m.present_count() == m.angles.len() * m.gap_count();
    if complete {
        assert!(heat.pixels().iter().all(|p| *p != MISSING_COLOR));
    }
}

#[test]
fn dims_come_from_the_crop() {
    let spec = SceneSpec::default();
    let mask = render_mask(&spec).unwrap();
    let image = RasterImage::new(mask.width(), mask.height()).unwrap();
    let prep = preprocess_mask(&image, &mask, &PipelineConfig::default()).unwrap();
    let dims = extract_dims(&prep.crop, "d");
    let (w, h) = spec.pattern_extent();
    assert!((dims.width as f64 - w).abs() <= 6.0, "{} vs {w}", dims.width);
    assert!((dims.height as f64 - h).abs() <= 6.0, "{} vs {h}", dims.height);
}

#[test]
fn identical_groups_give_zero_t() {
    let v = vec![3.0, 5.0, 4.0, 6.5, 5.5];
    let r = compare(&GroupSample::new(v.clone()).unwrap(), &GroupSample::new(v).unwrap()).unwrap();
    assert_eq!(r.t_score, 0.0);
    assert_eq!(r.cohens_d, 0.0);
    assert!((r.p_value - 1.0).abs() < 1e-12);
    assert_eq!(format_p(r.p_value), "1.0000");
    assert_eq!(format_p(1e-9), "<1e-06");
}

#[test]
fn fixed_window_is_respected() {
    let w = ColorWindow { d_min: 30.0, d_max: 50.0 };
    let mut config = PipelineConfig::default();
    config.colormap.window = Some(w);
    config.validate().unwrap();
    assert_eq!(config.colormap.window, Some(w));
}
