#![allow(dead_code)]

use rand::Rng;
use relockit::geometry::{random_rotation, random_unit_vector, DirectionalPose, Pose, Vec3};
use relockit::io::{BenchRow, QueryRecord, ReportFile, ReportKind, TrainingRecord};
use relockit::metrics::{AucEntry, MetricReport, Reducer};
use relockit::pipeline::{EstimateTable, RetrievalPlan, SceneDatabase};

/// Magnitudes spread over many decades, with the occasional exact zero.
pub fn awkward_float<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..10) {
        0 => 0.0,
        1 => -0.0,
        2 => rng.random_range(-3..=3) as f64,
        _ => rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-12..8)),
    }
}

pub fn random_db<R: Rng>(rng: &mut R, n: usize) -> SceneDatabase {
    let mut db = SceneDatabase::new();
    for i in 0..n {
        let t = Vec3::from_fn(|_, _| awkward_float(rng));
        db.insert(format!("img_{i:05}"), Pose::new(random_rotation(rng), t))
            .unwrap();
    }
    db
}

pub fn random_plan<R: Rng>(rng: &mut R, n: usize) -> RetrievalPlan {
    let mut plan = RetrievalPlan::new();
    for i in 0..n {
        let k = rng.random_range(2..12);
        let ids = (0..k)
            .map(|_| format!("db/{:04}.jpg", rng.random_range(0..5000)))
            .collect();
        plan.insert(format!("query/{i:04}.jpg"), ids).unwrap();
    }
    plan
}

pub fn random_estimates<R: Rng>(rng: &mut R, n: usize) -> EstimateTable {
    let mut table = EstimateTable::new();
    for i in 0..n {
        let dir = random_unit_vector(rng) * rng.random_range(0.01..100.0);
        let pose = DirectionalPose::new(random_rotation(rng), dir).unwrap();
        table
            .insert(format!("q{}", i / 10), format!("d{}", i % 10), pose)
            .unwrap();
    }
    table
}

fn opt<R: Rng>(rng: &mut R) -> Option<f64> {
    rng.random_bool(0.7).then(|| awkward_float(rng))
}

pub fn random_report<R: Rng>(rng: &mut R, n: usize) -> ReportFile {
    let mut report = ReportFile::new(ReportKind::Localization);
    report.seed = Some(rng.random());
    report
        .parameters
        .insert("averaging".into(), "median".into());
    report.queries = (0..n)
        .map(|i| {
            let ok = rng.random_bool(0.8);
            QueryRecord {
                query_id: format!("q{i:05}"),
                status: if ok { "ok" } else { "DegenerateGeometry" }.into(),
                message: (!ok).then(|| "degenerate geometry".to_owned()),
                rotation: ok.then(|| random_rotation(rng).to_row_array()),
                translation: ok.then(|| std::array::from_fn(|_| awkward_float(rng))),
                pairs_used: rng.random_range(2..20),
                condition_ratio: opt(rng),
                rotation_spread_deg: opt(rng),
                translation_error_m: opt(rng),
                rotation_error_deg: opt(rng),
            }
        })
        .collect();
    report.metrics = Some(MetricReport {
        reducer: Some(Reducer::Max),
        auc: vec![AucEntry {
            threshold: 30.0,
            value: rng.random(),
        }],
        median_t: opt(rng),
        n_total: n,
        n_failed: rng.random_range(0..=n),
        ..MetricReport::default()
    });
    report.bench = vec![BenchRow {
        k: 10,
        mode: "median".into(),
        trials: 100,
        failures: 0,
        median_translation_m: opt(rng),
        median_rotation_deg: opt(rng),
        wins_vs_other_mode: Some(97),
    }];
    report.training = Some(TrainingRecord {
        head: "directional_9d".into(),
        steps: 10,
        learning_rate: 1e-3,
        parameter_count: 1234,
        initial_loss: rng.random(),
        final_loss: rng.random(),
        swap_symmetric: true,
    });
    report
}
