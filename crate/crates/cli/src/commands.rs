use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use relockit::averaging::AveragingConfig;
use relockit::bench::{run_averaging_bench, BenchConfig};
use relockit::geometry::relative_pose;
use relockit::io::*;
use relockit::metrics::{absolute_errors, pair_error, MetricReport};
use relockit::pipeline::{
    localize as run_localize, oracle_plan, EstimateTable, GroundTruth, PipelineError,
    RelativePoseProvider, RetrievalPlan, SceneDatabase,
};
use relockit::regressor::{
    save_checkpoint, synthetic_pairs, train_toy, write_trace_csv, RegressorError, ToyModel,
    ToyModelConfig, TrainingPair,
};
use relockit::synthetic::{generate_scene, NoiseModel, OracleProvider};

use crate::{BenchArgs, EvalArgs, Format, LocalizeArgs, Status, SynthArgs, TrainArgs};

/// Line of `path` whose first field is `id`, for error messages.
fn line_of(path: &Path, id: &str) -> Option<usize> {
    let text = std::fs::read_to_string(path).ok()?;
    text.lines()
        .position(|l| l.split_whitespace().next() == Some(id))
        .map(|i| i + 1)
}

fn location(path: &Path, id: &str) -> String {
    match line_of(path, id) {
        Some(line) => format!("{}:{line}", path.display()),
        None => path.display().to_string(),
    }
}

/// Cross-file checks: every retrieved id is a database image and every
/// retrieved pair has an estimate.
fn check_inputs(
    a: &LocalizeArgs,
    db: &SceneDatabase,
    plan: &RetrievalPlan,
    est: &EstimateTable,
) -> Result<()> {
    if let Err(e) = plan.validate(db, MIN_PAIRS_PER_QUERY) {
        return Err(match e {
            PipelineError::UnknownId { query, id } => anyhow!(
                "{}: query `{query}` retrieves `{id}`, which is not in {}",
                location(&a.pairs, &query),
                a.db.display()
            ),
            other => anyhow!("{}: {other}", a.pairs.display()),
        });
    }
    for (q, ids) in plan.iter() {
        if let Some(d) = ids.iter().find(|d| est.get(q, d).is_none()) {
            bail!(
                "{}: no estimate for pair ({q}, {d}) retrieved at {}",
                a.estimates.display(),
                location(&a.pairs, q)
            );
        }
    }
    Ok(())
}

pub fn localize(a: &LocalizeArgs) -> Result<Status> {
    let db = load_pose_file(&a.db)?;
    let plan = load_pairs(&a.pairs)?;
    let estimates = load_estimates(&a.estimates)?;
    check_inputs(a, &db, &plan, &estimates)?;

    let results = run_localize(
        &db,
        &plan,
        &estimates,
        &AveragingConfig::with_mode(a.averaging),
    )?;
    let mut records: Vec<QueryRecord> = results.iter().map(QueryRecord::from_result).collect();
    let failed = records.iter().filter(|r| !r.is_ok()).count();

    let metrics = match &a.gt {
        Some(path) => {
            let gt: GroundTruth = load_pose_file(path)?
                .iter()
                .map(|(id, p)| (id.to_owned(), *p))
                .collect();
            let summary =
                absolute_errors(&results, &gt).with_context(|| path.display().to_string())?;
            for (rec, (_, err)) in records.iter_mut().zip(&summary.per_query) {
                if let Some(e) = err {
                    rec.translation_error_m = Some(e.translation_error);
                    rec.rotation_error_deg = Some(e.rotation_error);
                }
            }
            MetricReport::absolute(&summary)
        }
        None => MetricReport {
            n_total: records.len(),
            n_failed: failed,
            ..MetricReport::default()
        },
    };

    let mut report = ReportFile::new(ReportKind::Localization);
    report.parameters = BTreeMap::from([
        ("averaging".to_owned(), a.averaging.to_string()),
        ("db".to_owned(), a.db.display().to_string()),
        ("pairs".to_owned(), a.pairs.display().to_string()),
        ("estimates".to_owned(), a.estimates.display().to_string()),
    ]);
    report.queries = records;
    report.metrics = Some(metrics);
    write_report(&report, &a.out)?;

    match a.format {
        Format::Json => print!("{}", report.to_json()),
        Format::Text => {
            let mut tags: BTreeMap<&str, usize> = BTreeMap::new();
            for r in report.queries.iter().filter(|r| !r.is_ok()) {
                *tags.entry(r.status.as_str()).or_default() += 1;
            }
            println!(
                "localized {}/{} queries ({} averaging)",
                report.queries.len() - failed,
                report.queries.len(),
                a.averaging
            );
            for (tag, n) in tags {
                println!("  {tag}: {n}");
            }
            let m = report.metrics.as_ref().expect("set above");
            if let (Some(t), Some(r)) = (m.median_t, m.median_r) {
                println!("median error: {t:.6} m, {r:.6} deg");
            }
            println!("report: {}", a.out.display());
        }
    }
    Ok(if failed == 0 {
        Status::Complete
    } else {
        Status::Partial
    })
}

fn list_pairs(keys: &[&(String, String)]) -> String {
    let mut s = String::new();
    for (q, d) in keys.iter().take(10) {
        let _ = write!(s, " ({q}, {d})");
    }
    if keys.len() > 10 {
        let _ = write!(s, " and {} more", keys.len() - 10);
    }
    s
}

pub fn eval_relpose(a: &EvalArgs) -> Result<Status> {
    let pred = load_estimates(&a.pred)?;
    let gt = load_relative_poses(&a.gt)?;

    let pred_keys: HashSet<(String, String)> = pred
        .iter()
        .map(|(q, d, _)| (q.to_owned(), d.to_owned()))
        .collect();
    let missing: Vec<_> = gt.keys().filter(|k| !pred_keys.contains(*k)).collect();
    let pred_order: Vec<(String, String)> = pred
        .iter()
        .map(|(q, d, _)| (q.to_owned(), d.to_owned()))
        .collect();
    let extra: Vec<_> = pred_order.iter().filter(|k| !gt.contains_key(*k)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = String::from("KeyMismatch: prediction and ground-truth pairs differ");
        if !missing.is_empty() {
            let _ = write!(
                msg,
                "; {} pairs of {} have no prediction:{}",
                missing.len(),
                a.gt.display(),
                list_pairs(&missing)
            );
        }
        if !extra.is_empty() {
            let _ = write!(
                msg,
                "; {} pairs of {} have no ground truth:{}",
                extra.len(),
                a.pred.display(),
                list_pairs(&extra)
            );
        }
        bail!(msg);
    }
    if gt.is_empty() {
        bail!("{}: no pairs to evaluate", a.gt.display());
    }

    let errors: Vec<_> = gt
        .iter()
        .map(|((q, d), truth)| pair_error(pred.get(q, d).expect("keys checked"), truth))
        .collect();
    let metrics = MetricReport::relative(&errors, &a.thresholds.0, a.reducer)?;

    let mut report = ReportFile::new(ReportKind::Relpose);
    report.parameters = BTreeMap::from([
        ("pred".to_owned(), a.pred.display().to_string()),
        ("gt".to_owned(), a.gt.display().to_string()),
        ("reducer".to_owned(), a.reducer.to_string()),
    ]);
    report.metrics = Some(metrics);
    match a.format {
        Format::Json => print!("{}", report.to_json()),
        Format::Text => {
            let m = report.metrics.as_ref().expect("set above");
            println!(
                "pairs: {} ({} without a defined translation error)",
                m.n_total, m.n_failed
            );
            println!("reducer: {}", a.reducer);
            for e in &m.auc {
                println!("AUC@{:<4} {:.4}", e.threshold, e.value);
            }
            let pct = |v: Option<f64>| v.unwrap_or(f64::NAN);
            println!("RRA@15   {:.4}", pct(m.rra15));
            println!("RTA@15   {:.4}", pct(m.rta15));
            println!("mAA@30   {:.4}", pct(m.maa30));
        }
    }
    Ok(Status::Complete)
}

pub fn synth(a: &SynthArgs) -> Result<Status> {
    let noise = NoiseModel {
        rotation_sigma: a.noise_rot,
        direction_sigma: a.noise_dir,
        outlier_fraction: a.outlier_fraction,
        seed: a.seed,
        ..NoiseModel::noiseless(a.seed)
    };
    noise.validate()?;
    let scene = generate_scene(a.n_db, a.n_query, a.extent, a.layout, a.seed)?;
    let (db, queries) = (scene.database_db(), scene.queries_db());
    let plan = oracle_plan(&db, &queries, a.topk)?;
    let provider = OracleProvider::new(&queries, &db, noise);

    let mut estimates = EstimateTable::new();
    let mut relative = RelativePoseTable::new();
    for (q, ids) in plan.iter() {
        let qpose = queries.get(q).expect("plan built from queries");
        for d in ids {
            estimates
                .insert(q, d.as_str(), provider.relative_pose(q, d)?)
                .expect("retrieved ids are distinct");
            let dpose = db.get(d).expect("plan built from database");
            relative.insert((q.to_owned(), d.clone()), relative_pose(qpose, dpose));
        }
    }

    let path = |suffix: &str| format!("{}_{suffix}.txt", a.out_prefix);
    let files = [
        ("db", path("db")),
        ("pairs", path("pairs")),
        ("estimates", path("est")),
        ("query_gt", path("query_gt")),
        ("gt_relposes", path("gt_relposes")),
    ];
    save_pose_file(&db, &files[0].1)?;
    save_pairs(&plan, &files[1].1)?;
    save_estimates(&estimates, &files[2].1)?;
    save_pose_file(&queries, &files[3].1)?;
    save_relative_poses(&relative, &files[4].1)?;

    let mut report = ReportFile::new(ReportKind::Synth);
    report.seed = Some(a.seed);
    report.parameters = files
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    for (k, v) in [
        ("layout", format!("{:?}", a.layout).to_lowercase()),
        ("n_db", a.n_db.to_string()),
        ("n_query", a.n_query.to_string()),
        ("noise_rot", a.noise_rot.to_string()),
        ("noise_dir", a.noise_dir.to_string()),
        ("outlier_fraction", a.outlier_fraction.to_string()),
        ("topk", a.topk.to_string()),
        ("extent", a.extent.to_string()),
    ] {
        report.parameters.insert(k.to_owned(), v);
    }
    match a.format {
        Format::Json => print!("{}", report.to_json()),
        Format::Text => {
            println!("seed {}", a.seed);
            for (kind, p) in &files {
                println!("{kind}: {p}");
            }
        }
    }
    Ok(Status::Complete)
}

pub fn avg_bench(a: &BenchArgs) -> Result<Status> {
    let cfg = BenchConfig {
        trials: a.trials,
        k_list: a.k_list.0.clone(),
        rotation_sigma: a.noise_rot,
        direction_sigma: a.noise_dir.unwrap_or(a.noise_rot),
        outlier_fraction: a.outlier_fraction,
        outlier_rotation: a.outlier_angle,
        database_size: a.db_size,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let bench = run_averaging_bench(&cfg)?;

    let mut report = ReportFile::new(ReportKind::AvgBench);
    report.seed = Some(a.seed);
    report.parameters = BTreeMap::from([
        ("trials".to_owned(), cfg.trials.to_string()),
        ("noise_rot".to_owned(), cfg.rotation_sigma.to_string()),
        ("noise_dir".to_owned(), cfg.direction_sigma.to_string()),
        (
            "outlier_fraction".to_owned(),
            cfg.outlier_fraction.to_string(),
        ),
        ("outlier_angle".to_owned(), cfg.outlier_rotation.to_string()),
        ("db_size".to_owned(), cfg.database_size.to_string()),
    ]);
    report.bench = bench
        .cells
        .iter()
        .map(|c| BenchRow {
            k: c.k,
            mode: c.mode.to_string(),
            trials: c.trials,
            failures: c.failures,
            median_translation_m: c.median_translation,
            median_rotation_deg: c.median_rotation,
            wins_vs_other_mode: Some(c.wins),
        })
        .collect();

    match a.format {
        Format::Json => print!("{}", report.to_json()),
        Format::Text => {
            println!(
                "seed {}, {} trials, noise {} deg rotation / {} deg direction, outlier fraction {}",
                a.seed, cfg.trials, cfg.rotation_sigma, cfg.direction_sigma, cfg.outlier_fraction
            );
            println!(
                "{:>4}  {:<6}  {:>8}  {:>12}  {:>14}  {:>5}",
                "K", "mode", "failures", "median t (m)", "median R (deg)", "wins"
            );
            let show = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.6}"));
            for r in &report.bench {
                println!(
                    "{:>4}  {:<6}  {:>8}  {:>12}  {:>14}  {:>5}",
                    r.k,
                    r.mode,
                    r.failures,
                    show(r.median_translation_m),
                    show(r.median_rotation_deg),
                    r.wins_vs_other_mode.unwrap_or(0)
                );
            }
        }
    }
    Ok(Status::Complete)
}

fn swap_symmetric(model: &ToyModel, batch: &[TrainingPair]) -> Result<bool> {
    for pair in batch {
        let (p12, p21) = model.forward_pair(&pair.image1, &pair.image2)?;
        let (q21, q12) = model.forward_pair(&pair.image2, &pair.image1)?;
        if p12 != q12 || p21 != q21 {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn toy_train(a: &TrainArgs) -> Result<Status> {
    if a.pairs == 0 {
        bail!("--pairs must be positive");
    }
    let config = ToyModelConfig {
        head_mode: a.head,
        seed: a.seed,
        ..ToyModelConfig::default()
    };
    let mut model = ToyModel::new(config)?;
    let batch = synthetic_pairs(a.pairs, a.image_size, a.image_size, a.seed);
    let trace = match train_toy(&mut model, &batch, a.steps, a.lr) {
        Ok(t) => t,
        Err(e @ RegressorError::NonFiniteLoss { .. }) => {
            eprintln!("seed {}: {e}; no checkpoint written", a.seed);
            return Ok(Status::Partial);
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&model, &a.out).with_context(|| a.out.display().to_string())?;
    write_trace_csv(&trace, &a.trace).with_context(|| a.trace.display().to_string())?;
    let symmetric = swap_symmetric(&model, &batch)?;

    let (first, last) = (trace[0], trace[trace.len() - 1]);
    let mut report = ReportFile::new(ReportKind::ToyTrain);
    report.seed = Some(a.seed);
    report.parameters = BTreeMap::from([
        ("pairs".to_owned(), a.pairs.to_string()),
        ("image_size".to_owned(), a.image_size.to_string()),
        ("checkpoint".to_owned(), a.out.display().to_string()),
        ("trace".to_owned(), a.trace.display().to_string()),
    ]);
    report.training = Some(TrainingRecord {
        head: a.head.name().to_owned(),
        steps: a.steps,
        learning_rate: a.lr,
        parameter_count: model.parameter_count(),
        initial_loss: first.total(),
        final_loss: last.total(),
        swap_symmetric: symmetric,
    });
    match a.format {
        Format::Json => print!("{}", report.to_json()),
        Format::Text => {
            println!(
                "seed {}, head {}, {} parameters, {} steps at lr {}",
                a.seed,
                a.head,
                model.parameter_count(),
                a.steps,
                a.lr
            );
            println!(
                "loss {:.6} -> {:.6} rad (loss_R {:.6}, loss_t {:.6})",
                first.total(),
                last.total(),
                last.loss_r,
                last.loss_t
            );
            println!(
                "swap symmetry: {}",
                if symmetric { "exact" } else { "BROKEN" }
            );
        }
    }
    Ok(if symmetric {
        Status::Complete
    } else {
        Status::Partial
    })
}
