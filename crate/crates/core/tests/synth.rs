use std::fs;

use colabel::synth::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(color: usize, body_type: usize, make: usize, variant: usize, seed: u64) -> VehicleSpec {
    VehicleSpec::sample(color, body_type, make, variant, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn rgb_to_hue(p: &image::Rgb<u8>) -> Option<f64> {
    hue_of([p[0] as f64, p[1] as f64, p[2] as f64])
}

fn circular_mean(hues: &[f64]) -> f64 {
    let (s, c) = hues.iter().fold((0.0, 0.0), |(s, c), h| (s + h.to_radians().sin(), c + h.to_radians().cos()));
    s.atan2(c).to_degrees().rem_euclid(360.0)
}

fn hue_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[test]
fn render_is_deterministic() {
    let schema = Schema::default();
    let s = spec(2, 1, 5, 2, 9);
    let a = render_vehicle(&s, &schema, 32, &DomainStyle::default()).unwrap();
    let b = render_vehicle(&s, &schema, 32, &DomainStyle::default()).unwrap();
    assert_eq!(a.as_raw(), b.as_raw());
}

#[test]
fn render_rejects_out_of_range_ids() {
    let schema = Schema::default();
    let mut s = spec(0, 0, 0, 0, 1);
    s.make = 8;
    assert!(render_vehicle(&s, &schema, 32, &DomainStyle::default()).is_err());
    s.make = 0;
    s.color = 6;
    assert!(render_vehicle(&s, &schema, 32, &DomainStyle::default()).is_err());
}

#[test]
fn body_hue_maps_back_to_color() {
    let schema = Schema::default();
    let band = 360.0 / schema.colors as f64 / 2.0;
    for seed in 0..40u64 {
        for color in 0..schema.colors {
            let s = spec(color, (seed % 4) as usize, (seed % 8) as usize, (seed % 3) as usize, seed * 31 + color as u64);
            let (img, info) = render_vehicle_with_info(&s, &schema, 32, &DomainStyle::default()).unwrap();
            let hues: Vec<f64> = img
                .pixels()
                .zip(&info.body)
                .filter(|(_, &b)| b)
                .filter_map(|(p, _)| rgb_to_hue(p))
                .collect();
            assert!(hues.len() > 50, "too few body pixels");
            let mean = circular_mean(&hues);
            let nearest = (0..schema.colors)
                .min_by(|&a, &b| {
                    let ha = 360.0 * a as f64 / schema.colors as f64;
                    let hb = 360.0 * b as f64 / schema.colors as f64;
                    hue_gap(mean, ha).total_cmp(&hue_gap(mean, hb))
                })
                .unwrap();
            assert_eq!(nearest, color, "seed {seed}: mean hue {mean}");
            assert!(hue_gap(mean, 360.0 * color as f64 / schema.colors as f64) < band);
        }
    }
}

#[test]
fn make_changes_only_the_emblem() {
    let schema = Schema::default();
    for seed in 0..30u64 {
        let base = spec((seed % 6) as usize, (seed % 4) as usize, 0, (seed % 3) as usize, seed);
        let (a, info) = render_vehicle_with_info(&base, &schema, 32, &DomainStyle::default()).unwrap();
        for make in 1..schema.makes {
            let other = VehicleSpec { make, ..base };
            let b = render_vehicle(&other, &schema, 32, &DomainStyle::default()).unwrap();
            let mut differs = false;
            for (x, y, p) in a.enumerate_pixels() {
                if p != b.get_pixel(x, y) {
                    differs = true;
                    assert!(info.emblem.contains(x as usize, y as usize), "pixel ({x},{y}) outside emblem box");
                }
            }
            assert!(differs, "makes 0 and {make} render identically");
        }
    }
}

fn mixed_visibility_configs(count: usize) -> Vec<DatasetConfig> {
    let vis = |color, body_type, make, model| Visibility { color, body_type, make, model };
    vec![
        DatasetConfig { name: "compcars".into(), count, visibility: vis(false, true, true, true), style: DomainStyle::default(), makes: None },
        DatasetConfig { name: "boxcars".into(), count, visibility: vis(false, false, true, true), style: DomainStyle::default(), makes: None },
        DatasetConfig { name: "cars196".into(), count, visibility: vis(false, false, true, true), style: DomainStyle::default(), makes: None },
    ]
}

#[test]
fn coverage_matrix_follows_visibility() {
    let config = GenerationConfig { seed: 3, image_size: 32, schema: Schema::default(), datasets: mixed_visibility_configs(60) };
    let sets = generate_datasets(&config).unwrap();
    for (ds, cfg) in sets.iter().zip(&config.datasets) {
        for kind in AnnotationKind::ALL {
            let expected = if cfg.visibility.shows(kind) { 1.0 } else { 0.0 };
            assert_eq!(ds.coverage(kind), expected, "{} {kind}", ds.name);
        }
    }
}

#[test]
fn all_visible_means_no_blanks() {
    let cfg = DatasetConfig { name: "full".into(), count: 40, visibility: Visibility::ALL, style: DomainStyle::default(), makes: None };
    let ds = generate_dataset(&cfg, &Schema::default(), 32, 1).unwrap();
    assert!(ds.records.iter().all(|r| AnnotationKind::ALL.iter().all(|&k| r.labels.get(k).is_some())));
}

#[test]
fn masking_never_alters_images() {
    let schema = Schema::default();
    let full = DatasetConfig { name: "d".into(), count: 30, visibility: Visibility::ALL, style: DomainStyle::default(), makes: None };
    let masked = DatasetConfig { visibility: Visibility { color: false, body_type: false, make: true, model: false }, ..full.clone() };
    let a = generate_dataset(&full, &schema, 32, 11).unwrap();
    let b = generate_dataset(&masked, &schema, 32, 11).unwrap();
    for (ra, rb) in a.records.iter().zip(&b.records) {
        assert_eq!(ra.image, rb.image);
        assert_eq!(ra.truth, rb.truth);
        assert_eq!(rb.labels.get(AnnotationKind::Color), None);
        assert_eq!(rb.labels.get(AnnotationKind::Make), ra.labels.get(AnnotationKind::Make));
    }
}

#[test]
fn generation_is_class_balanced_and_deterministic() {
    let schema = Schema::default();
    let cfg = DatasetConfig { name: "bal".into(), count: 200, visibility: Visibility::ALL, style: DomainStyle::default(), makes: None };
    let a = generate_dataset(&cfg, &schema, 32, 5).unwrap();
    let b = generate_dataset(&cfg, &schema, 32, 5).unwrap();
    assert_eq!(a, b);
    for kind in AnnotationKind::ALL {
        let mut counts = vec![0usize; schema.cardinality(kind)];
        for r in &a.records {
            counts[r.labels.get(kind).unwrap()] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{kind}: {counts:?}");
    }
}

#[test]
fn generation_rejects_bad_configs() {
    let schema = Schema::default();
    let mut cfg = DatasetConfig { name: "x".into(), count: 0, visibility: Visibility::ALL, style: DomainStyle::default(), makes: None };
    assert!(generate_dataset(&cfg, &schema, 32, 0).is_err());
    cfg.count = 10;
    cfg.makes = Some(vec![]);
    assert!(generate_dataset(&cfg, &schema, 32, 0).is_err());
    cfg.makes = Some(vec![9]);
    assert!(generate_dataset(&cfg, &schema, 32, 0).is_err());
}

fn checker(size: u32) -> image::RgbImage {
    image::RgbImage::from_fn(size, size, |x, y| {
        let v = if (x / 4 + y / 4) % 2 == 0 { 30 } else { 220 };
        image::Rgb([v, (x * 7 % 256) as u8, (y * 5 % 256) as u8])
    })
}

#[test]
fn jpeg_flat_gray_is_nearly_lossless_at_q100() {
    let img = image::RgbImage::from_pixel(32, 32, image::Rgb([128, 128, 128]));
    let out = jpeg_roundtrip(&img, 100).unwrap();
    assert_eq!(out.dimensions(), img.dimensions());
    assert!(psnr(&img, &out) >= 45.0);
}

#[test]
fn jpeg_quality_sequence_degrades_monotonically() {
    let schema = Schema::default();
    let rendered = render_vehicle(&spec(1, 2, 3, 1, 4), &schema, 32, &DomainStyle::default()).unwrap();
    for img in [checker(32), rendered] {
        let p: Vec<f64> = [90, 70, 50].iter().map(|&q| psnr(&img, &jpeg_roundtrip(&img, q).unwrap())).collect();
        assert!(p[0] >= p[1] && p[1] >= p[2], "{p:?}");
        assert_ne!(jpeg_roundtrip(&img, 50).unwrap(), img);
    }
}

#[test]
fn jpeg_rejects_bad_quality() {
    let img = checker(16);
    assert!(jpeg_roundtrip(&img, 0).is_err());
    assert!(jpeg_roundtrip(&img, 101).is_err());
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        name: "rt".into(),
        count: 25,
        visibility: Visibility { color: false, body_type: true, make: true, model: true },
        style: DomainStyle::default(),
        makes: None,
    };
    let ds = generate_dataset(&cfg, &Schema::default(), 32, 8).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(ds, back);
    let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    assert!(first["labels"]["color"].is_null());
    assert!(first["image_path"].as_str().unwrap().ends_with(".png"));
}

#[test]
fn load_names_unknown_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { name: "bad".into(), count: 3, visibility: Visibility::ALL, style: DomainStyle::default(), makes: None };
    let ds = generate_dataset(&cfg, &Schema::default(), 32, 8).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let path = dir.path().join("manifest.jsonl");
    let text = fs::read_to_string(&path).unwrap().replacen("\"color\"", "\"paint\"", 1);
    fs::write(&path, text).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("paint"), "{err}");
}

#[test]
fn load_reports_missing_image() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { name: "gone".into(), count: 3, visibility: Visibility::ALL, style: DomainStyle::default(), makes: None };
    let ds = generate_dataset(&cfg, &Schema::default(), 32, 8).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    fs::remove_file(dir.path().join("images").join(format!("{}.png", ds.records[1].id))).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(colabel::Error::MissingFile(_))));
}

#[test]
fn null_label_is_a_blank() {
    let labels: Labels = serde_json::from_str(r#"{"color": null, "type": 2, "make": 1, "model": null}"#).unwrap();
    assert_eq!(labels.get(AnnotationKind::Color), None);
    assert_eq!(labels.get(AnnotationKind::Type), Some(2));
    let partial: Labels = serde_json::from_str(r#"{"make": 4}"#).unwrap();
    assert_eq!(partial.get(AnnotationKind::Model), None);
}

#[test]
fn knowledge_base_is_total_and_consistent() {
    let schema = Schema::default();
    let kb = KnowledgeBase::from_catalog(&schema);
    assert_eq!(kb.len(), schema.models());
    assert_eq!(kb.models().collect::<Vec<_>>(), (0..schema.models()).collect::<Vec<_>>());
    assert_eq!(kb.lookup(schema.model_id(2, 1, 0)), Some((2, 1)));
    assert_eq!(kb.consistent_models(2, 1).len(), schema.variants);

    let cfg = DatasetConfig { name: "kb".into(), count: 1000, visibility: Visibility::ALL, style: DomainStyle::default(), makes: None };
    let ds = generate_dataset(&cfg, &schema, 16, 21).unwrap();
    for r in &ds.records {
        let model = r.labels.get(AnnotationKind::Model).unwrap();
        let expected = (r.labels.get(AnnotationKind::Make).unwrap(), r.labels.get(AnnotationKind::Type).unwrap());
        assert_eq!(kb.lookup(model), Some(expected));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identical_config_and_seed_give_identical_datasets(seed in any::<u64>(), count in 1usize..12) {
        let cfg = DatasetConfig { name: "p".into(), count, visibility: Visibility::ALL, style: DomainStyle::default(), makes: None };
        let a = generate_dataset(&cfg, &Schema::default(), 16, seed).unwrap();
        let b = generate_dataset(&cfg, &Schema::default(), 16, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
