use std::collections::HashMap;

use relockit::averaging::{AveragingConfig, RotationMode};
use relockit::bench::{run_averaging_bench, BenchConfig};
use relockit::geometry::rotation_angle;
use relockit::metrics::absolute_errors;
use relockit::pipeline::{localize, oracle_plan, GroundTruth, LocalizationFailure};
use relockit::regressor::{procedural_image, ToyModel, ToyModelConfig, ToyModelProvider};
use relockit::synthetic::{generate_scene, Layout, NoiseModel, OracleProvider, SyntheticScene};

fn ground_truth(scene: &SyntheticScene) -> GroundTruth {
    scene.queries.iter().cloned().collect()
}

#[test]
fn noiseless_scene_is_recovered_exactly() {
    for seed in 0..5 {
        let scene = generate_scene(10, 20, 10.0, Layout::General, seed).unwrap();
        let (db, queries) = (scene.database_db(), scene.queries_db());
        let plan = oracle_plan(&db, &queries, 10).unwrap();
        let provider = OracleProvider::new(&queries, &db, NoiseModel::noiseless(seed));
        let results = localize(&db, &plan, &provider, &AveragingConfig::default()).unwrap();
        assert_eq!(results.len(), 20);
        for (r, (id, gt)) in results.iter().zip(&scene.queries) {
            assert_eq!(&r.query_id, id);
            let pose = r.pose().expect("localized");
            assert!((pose.camera_center() - gt.camera_center()).norm() < 1e-6);
            assert!(rotation_angle(&pose.rotation, &gt.rotation) < 1e-6);
            assert_eq!(r.pairs_used, 10);
        }
    }
}

#[test]
fn collinear_scene_is_reported_degenerate() {
    let scene = generate_scene(10, 20, 10.0, Layout::Collinear, 3).unwrap();
    let (db, queries) = (scene.database_db(), scene.queries_db());
    let plan = oracle_plan(&db, &queries, 10).unwrap();
    let provider = OracleProvider::new(&queries, &db, NoiseModel::noiseless(3));
    let results = localize(&db, &plan, &provider, &AveragingConfig::default()).unwrap();
    for r in &results {
        assert!(matches!(
            r.outcome,
            Err(LocalizationFailure::DegenerateGeometry { .. })
        ));
        assert!(r.diagnostics.unwrap().condition_ratio < 1e-6);
    }
    let summary = absolute_errors(&results, &ground_truth(&scene)).unwrap();
    assert_eq!(summary.n_failed, 20);
    assert_eq!(summary.median_translation, None);
}

#[test]
fn two_degree_noise_gives_sub_two_degree_median_rotation_error() {
    let report = run_averaging_bench(&BenchConfig {
        k_list: vec![10],
        ..BenchConfig::default()
    })
    .unwrap();
    let cell = report.cell(10, RotationMode::Median).unwrap();
    assert_eq!(cell.failures, 0);
    assert!(cell.median_rotation.unwrap() < 2.0, "{cell:?}");
}

#[test]
fn more_pairs_do_not_hurt_translation() {
    let report = run_averaging_bench(&BenchConfig::default()).unwrap();
    let t = |k| {
        report
            .cell(k, RotationMode::Median)
            .unwrap()
            .median_translation
            .unwrap()
    };
    assert!(t(10) <= t(5) && t(5) <= t(2), "{} {} {}", t(2), t(5), t(10));
}

#[test]
fn median_rotation_resists_outliers() {
    let report = run_averaging_bench(&BenchConfig {
        k_list: vec![10],
        outlier_fraction: 0.1,
        ..BenchConfig::default()
    })
    .unwrap();
    let wins = report.cell(10, RotationMode::Median).unwrap().wins;
    assert!(wins >= 95, "median better in {wins}/100 trials");
}

#[test]
fn noisy_oracle_through_pipeline_matches_ground_truth_roughly() {
    let scene = generate_scene(30, 15, 10.0, Layout::General, 9).unwrap();
    let (db, queries) = (scene.database_db(), scene.queries_db());
    let plan = oracle_plan(&db, &queries, 10).unwrap();
    let provider = OracleProvider::new(&queries, &db, NoiseModel::gaussian(1.0, 1.0, 9));
    let results = localize(&db, &plan, &provider, &AveragingConfig::default()).unwrap();
    let summary = absolute_errors(&results, &ground_truth(&scene)).unwrap();
    assert_eq!(summary.n_failed, 0);
    assert!(summary.median_rotation.unwrap() < 1.0);
    assert!(summary.median_translation.unwrap() < 0.5);
}

#[test]
fn toy_model_can_serve_as_provider() {
    let scene = generate_scene(6, 3, 10.0, Layout::General, 4).unwrap();
    let (db, queries) = (scene.database_db(), scene.queries_db());
    let images: HashMap<_, _> = scene
        .database
        .iter()
        .chain(&scene.queries)
        .enumerate()
        .map(|(i, (id, _))| (id.clone(), procedural_image(16, 16, i as u64)))
        .collect();
    let model = ToyModel::new(ToyModelConfig {
        patch_size: 4,
        token_dim: 16,
        ..ToyModelConfig::default()
    })
    .unwrap();
    let provider = ToyModelProvider {
        model: &model,
        images: &images,
    };
    let plan = oracle_plan(&db, &queries, 4).unwrap();
    let results = localize(&db, &plan, &provider, &AveragingConfig::default()).unwrap();
    let ids: Vec<_> = results.iter().map(|r| r.query_id.as_str()).collect();
    assert_eq!(ids, ["q0000", "q0001", "q0002"]);
    for r in &results {
        assert_eq!(r.pairs_used, 4);
    }
}
