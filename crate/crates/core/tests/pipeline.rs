use mcdrop::calibration::{calibrate, parse_records, write_records};
use mcdrop::clustering::{cluster_pipeline, partition_labels, Algorithm, ClusterConfig};
use mcdrop::evaluation::{cluster_to_detection, evaluate, parse_ground_truth, write_ground_truth};
use mcdrop::ingest::{filter_background, parse_sample_set, write_sample_set, IngestConfig};
use mcdrop::metrics::adjusted_rand_index;
use mcdrop::report::build_report;
use mcdrop::synth::{generate, generate_calibration_records, InstanceSpec, SceneSpec, Shape};

fn spec(seed: u64) -> SceneSpec {
    let inst = |b: [f64; 4], class, shape| InstanceSpec {
        true_box: b,
        true_class: class,
        shape,
        box_jitter_sigma: 2.0,
        class_confusion: 0.15,
        mask_noise: 0.05,
        miss_rate: 0.0,
    };
    SceneSpec {
        image_id: "street".into(),
        height: 240,
        width: 320,
        num_classes: 4,
        n_repetitions: 60,
        seed,
        instances: vec![
            inst([20.0, 30.0, 90.0, 110.0], 1, Shape::Rect),
            inst([150.0, 40.0, 230.0, 100.0], 3, Shape::Ellipse),
            inst([60.0, 150.0, 200.0, 220.0], 2, Shape::Ellipse),
        ],
    }
}

#[test]
fn synthetic_scene_survives_file_round_trip_and_clusters_back() {
    let scene = generate(&spec(5)).unwrap();
    let mut buf = Vec::new();
    write_sample_set(&scene.samples, &mut buf).unwrap();
    let cfg = IngestConfig::default();
    let parsed = parse_sample_set(buf.as_slice(), &cfg).unwrap();
    assert_eq!(parsed, scene.samples);

    // no leak here reaches the background threshold, so nothing is dropped
    let kept = filter_background(&parsed, &cfg);
    assert_eq!(kept.len(), scene.samples.len());

    for algorithm in [Algorithm::Bgm, Algorithm::Agg] {
        let clusters = cluster_pipeline(
            &kept,
            &ClusterConfig {
                algorithm,
                seed: 1,
                ..ClusterConfig::default()
            },
        )
        .unwrap();
        assert_eq!(clusters.len(), 3, "{algorithm:?}");
        let ari = adjusted_rand_index(&partition_labels(&clusters, kept.len()), &scene.true_labels);
        assert_eq!(ari, 1.0, "{algorithm:?}");
    }
}

#[test]
fn cluster_detections_score_perfectly_against_the_generator_truth() {
    let scene = generate(&spec(9)).unwrap();
    let mut gt_buf = Vec::new();
    write_ground_truth(&scene.ground_truth, &mut gt_buf).unwrap();
    let gts = parse_ground_truth(gt_buf.as_slice(), |_| Some((240, 320))).unwrap();
    assert_eq!(gts, scene.ground_truth);

    let clusters = cluster_pipeline(&scene.samples, &ClusterConfig::default()).unwrap();
    let preds: Vec<_> = clusters
        .iter()
        .map(|c| {
            let r = build_report(c, 240, 320, 0.5).unwrap();
            cluster_to_detection("street", &r).unwrap()
        })
        .collect();
    let e = evaluate(&preds, &gts, 0.5).unwrap();
    assert_eq!(e.map50_box(), Some(1.0));
    assert_eq!(e.map50_mask(), Some(1.0));
}

#[test]
fn calibration_records_round_trip_and_recover_temperature() {
    let recs = generate_calibration_records(4000, 2.5, 6, 3).unwrap();
    let mut buf = Vec::new();
    write_records(&recs, &mut buf).unwrap();
    let back = parse_records(buf.as_slice()).unwrap();
    assert_eq!(back, recs);
    let s = calibrate(&back, 10).unwrap();
    assert!((s.temperature - 2.5).abs() / 2.5 < 0.03, "{}", s.temperature);
    assert!(!s.already_calibrated);
    assert!(s.nll_after <= s.nll_before);
}
